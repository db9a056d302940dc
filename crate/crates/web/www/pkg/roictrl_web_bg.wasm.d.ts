/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const attention_flops: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
export const edge_gaps: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const footprint_overlay: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const roi_grid: (a: bigint, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
export const roi_round_trip: (a: bigint, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
export const source_image: (a: bigint, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
