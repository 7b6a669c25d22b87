/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const exponent_table: (a: number, b: number, c: number, d: number) => [number, number];
export const flip: (a: number, b: number, c: number) => [number, number];
export const inspect: (a: number, b: number) => [number, number];
export const last_bit: () => number;
export const rank_msb: (a: number, b: number, c: number, d: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
