/* tslint:disable */
/* eslint-disable */

export class InterventionDemo {
    free(): void;
    [Symbol.dispose](): void;
    hierarchy(): string;
    intervene(id: number, body: string): string;
    constructor(seed: number, n: number, epochs: number);
    prediction(id: number): string;
    samples(offset: number, limit: number): string;
}

/**
 * JSON match table of one-hot SAE splitting.
 */
export function oneHotSplit(seed: number, parents: number, subs: number, n: number, epochs: number): string;

/**
 * JSON `{prob, weights, max, mean}` for the given sub-concept probabilities.
 */
export function softMax(probs: Float64Array): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_interventiondemo_free: (a: number, b: number) => void;
    readonly interventiondemo_hierarchy: (a: number) => [number, number];
    readonly interventiondemo_intervene: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly interventiondemo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly interventiondemo_prediction: (a: number, b: number) => [number, number, number, number];
    readonly interventiondemo_samples: (a: number, b: number, c: number) => [number, number, number, number];
    readonly oneHotSplit: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly softMax: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
