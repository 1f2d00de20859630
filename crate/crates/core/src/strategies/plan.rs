use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::schedule::BitSchedule;
use crate::error::{Error, Result};
use crate::quant::FULL_PRECISION;

/// Which training procedures a quantization run combines.
///
/// `baseline` is direct quantized fine-tuning, i.e. progressive quantization
/// over the one-step ladder `{32, k}`; it does not combine with anything.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StrategySet {
    pub baseline: bool,
    pub ts: bool,
    pub pq: bool,
    pub guided: bool,
}

impl StrategySet {
    pub fn is_empty(&self) -> bool {
        !(self.baseline || self.ts || self.pq || self.guided)
    }
}

impl FromStr for StrategySet {
    type Err = Error;

    /// Parses names joined by `+` or `,`, e.g. `pq+ts+guided`.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = StrategySet::default();
        for tok in s.split(['+', ',']).map(str::trim).filter(|t| !t.is_empty()) {
            let slot = match tok.to_ascii_lowercase().as_str() {
                "baseline" => &mut set.baseline,
                "ts" => &mut set.ts,
                "pq" => &mut set.pq,
                "guided" => &mut set.guided,
                other => {
                    return Err(Error::Plan(format!(
                        "unknown strategy `{other}` (expected baseline, ts, pq or guided)"
                    )))
                }
            };
            *slot = true;
        }
        Ok(set)
    }
}

impl fmt::Display for StrategySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.baseline, "baseline"),
            (self.pq, "pq"),
            (self.ts, "ts"),
            (self.guided, "guided"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        f.write_str(&names.join("+"))
    }
}

/// One training segment of a plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Phase {
    /// 1-based position in the plan.
    pub index: usize,
    pub name: String,
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Trains alongside the full-precision twin.
    pub guided: bool,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>2}  {:<12} weights {:>2}-bit  activations {:>2}-bit{}",
            self.index,
            self.name,
            self.weight_bits,
            self.act_bits,
            if self.guided { "  guided" } else { "" }
        )
    }
}

/// Expands a strategy set into its ordered phases.
///
/// PQ walks `schedule` (default `{32, 8, 4, 2}` cut at `target_bits`); without
/// PQ there is a single rung at `target_bits`. TS splits every rung `b` into
/// `(b, stage1_act_bits)` followed by `(b, b)`. Guided marks every phase.
pub fn compose(
    set: StrategySet,
    target_bits: u32,
    schedule: Option<&BitSchedule>,
    stage1_act_bits: u32,
) -> Result<Vec<Phase>> {
    if set.is_empty() {
        return Err(Error::Plan("empty strategy set".into()));
    }
    if set.baseline && (set.ts || set.pq || set.guided) {
        return Err(Error::Plan(format!(
            "baseline does not combine with other strategies (got {set})"
        )));
    }
    if !(1..FULL_PRECISION).contains(&target_bits) {
        return Err(Error::Plan(format!("target bit-width {target_bits} must lie in 1..32")));
    }
    let ladder = match (set.pq, schedule) {
        (true, Some(s)) => s.clone(),
        (true, None) => BitSchedule::ladder_to(target_bits)?,
        (false, Some(s)) if s.rungs().len() > 1 => {
            return Err(Error::Plan(format!(
                "bit schedule {:?} needs the pq strategy",
                s.bits()
            )))
        }
        (false, _) => BitSchedule::direct(target_bits)?,
    };
    if ladder.target() != target_bits {
        return Err(Error::Plan(format!(
            "schedule {:?} ends at {} but the target is {target_bits}",
            ladder.bits(),
            ladder.target()
        )));
    }
    let mut phases = Vec::new();
    let mut push = |name: String, w: u32, a: u32| {
        phases.push(Phase {
            index: phases.len() + 1,
            name,
            weight_bits: w,
            act_bits: a,
            guided: set.guided,
        })
    };
    for &b in ladder.rungs() {
        if set.ts {
            if stage1_act_bits <= b {
                return Err(Error::Plan(format!(
                    "stage-1 activations ({stage1_act_bits}-bit) must be wider than the {b}-bit rung"
                )));
            }
            push(format!("b{b}-stage1"), b, stage1_act_bits);
            push(format!("b{b}-stage2"), b, b);
        } else {
            push(format!("b{b}"), b, b);
        }
    }
    Ok(phases)
}
