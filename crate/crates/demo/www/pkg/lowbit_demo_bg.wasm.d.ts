/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const inputs: (a: number, b: number, c: number) => [number, number];
export const staircase: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const ste_mask: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const weight_histogram: (a: number, b: number, c: number, d: bigint, e: number) => [number, number, number, number];
export const weight_levels: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
