/* tslint:disable */
/* eslint-disable */

/**
 * `n` evenly spaced inputs on `[lo, hi]`.
 */
export function inputs(lo: number, hi: number, n: number): Float64Array;

/**
 * Activation quantizer output at each of [`inputs`]`(lo, hi, n)`.
 */
export function staircase(bits: number, lo: number, hi: number, n: number): Float64Array;

/**
 * Gradient reaching each input of the activation quantizer when the
 * upstream gradient is one everywhere: one inside `[0, 1]`, zero outside.
 */
export function ste_mask(bits: number, lo: number, hi: number, n: number): Float64Array;

/**
 * Quantizes `n` weights drawn from N(0, std²) and counts how many land on
 * each of [`weight_levels`].
 */
export function weight_histogram(bits: number, n: number, std: number, seed: bigint, affine: boolean): Uint32Array;

/**
 * Output levels of the weight quantizer, ascending.
 */
export function weight_levels(bits: number, affine: boolean): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly inputs: (a: number, b: number, c: number) => [number, number];
    readonly staircase: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly ste_mask: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly weight_histogram: (a: number, b: number, c: number, d: bigint, e: number) => [number, number, number, number];
    readonly weight_levels: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
