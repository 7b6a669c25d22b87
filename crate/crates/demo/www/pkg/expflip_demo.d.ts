/* tslint:disable */
/* eslint-disable */

/**
 * Per exponent bit of `weight`: the flipped value, the analytic bit gradient,
 * whether flipping it raises the loss to first order, and whether the result
 * stays inside `[min, max]`.
 */
export function exponent_table(weight: number, grad: number, min: number, max: number): string;

/**
 * Flips bit `bit` (0 = sign, 1..8 = exponent, 9..31 = mantissa) and inspects the result.
 */
export function flip(text: string, bit: number): string;

/**
 * Field breakdown of a float given as decimal or `0x` hex pattern.
 */
export function inspect(text: string): string;

/**
 * Highest valid bit index, for building the bit grid in the page.
 */
export function last_bit(): number;

/**
 * Ranks weights by `|w * dL/dw|` for an exponent-MSB flip, eligible candidates first.
 * `weights` and `grads` are comma or whitespace separated lists of equal length.
 */
export function rank_msb(weights: string, grads: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly exponent_table: (a: number, b: number, c: number, d: number) => [number, number];
    readonly flip: (a: number, b: number, c: number) => [number, number];
    readonly inspect: (a: number, b: number) => [number, number];
    readonly last_bit: () => number;
    readonly rank_msb: (a: number, b: number, c: number, d: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
