/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_interventiondemo_free: (a: number, b: number) => void;
export const interventiondemo_hierarchy: (a: number) => [number, number];
export const interventiondemo_intervene: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const interventiondemo_new: (a: number, b: number, c: number) => [number, number, number];
export const interventiondemo_prediction: (a: number, b: number) => [number, number, number, number];
export const interventiondemo_samples: (a: number, b: number, c: number) => [number, number, number, number];
export const oneHotSplit: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const softMax: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
