pub mod data_cases;
pub mod gradcheck;
pub mod op_cases;
pub mod quant_cases;
pub mod strategy_cases;
