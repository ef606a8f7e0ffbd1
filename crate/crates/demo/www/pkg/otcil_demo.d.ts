/* tslint:disable */
/* eslint-disable */

/**
 * Draws one synthetic image of class 0 and aligns its patches to the
 * attributes of every class (two classes from the same family plus one
 * unrelated class). Shows the selected patches, plans and the three
 * strongest correspondences per class.
 */
export function patch_alignment(seed: number, noise: number, k: number, lambda: number): string;

/**
 * Fits a Gaussian to 60 correlated 2-D points and draws `count` pseudo
 * features from it.
 */
export function replay_samples(seed: number, count: number, correlation: number, diagonal: boolean): string;

/**
 * Entropic transport plan for a row-major `rows × cols` cost matrix with
 * uniform marginals.
 */
export function transport_plan(cost: Float64Array, row_count: number, cols: number, lambda: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly patch_alignment: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly replay_samples: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly transport_plan: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
