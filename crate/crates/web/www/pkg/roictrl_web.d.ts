/* tslint:disable */
/* eslint-disable */

/**
 * Instance-attention FLOPs `[mask, roi]` per side in `sides`.
 */
export function attention_flops(sides: Uint32Array, r: number, n: number, c: number, l: number): Float64Array;

/**
 * Distance in pixels from each continuous box edge (left, right, top,
 * bottom) to the edge of the nearest-integer mask.
 */
export function edge_gaps(h: number, w: number, x1: number, y1: number, x2: number, y2: number): Float64Array;

/**
 * RGBA view of [`footprint_classes`]: gray where both agree, red where
 * only the quantized mask covers, blue where only the exact box does.
 */
export function footprint_overlay(h: number, w: number, x1: number, y1: number, x2: number, y2: number): Uint8Array;

/**
 * The `r × r` ROI-Align grid of the box.
 */
export function roi_grid(seed: bigint, h: number, w: number, x1: number, y1: number, x2: number, y2: number, r: number): Uint8Array;

/**
 * `unpool(align(x))` on the footprint; elsewhere the source at a quarter
 * opacity.
 */
export function roi_round_trip(seed: bigint, h: number, w: number, x1: number, y1: number, x2: number, y2: number, r: number): Uint8Array;

/**
 * Synthetic scene used as the feature map.
 */
export function source_image(seed: bigint, h: number, w: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly attention_flops: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly edge_gaps: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly footprint_overlay: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly roi_grid: (a: bigint, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly roi_round_trip: (a: bigint, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly source_image: (a: bigint, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
