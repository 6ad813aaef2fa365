/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_digits_free: (a: number, b: number) => void;
export const __wbg_karatedemo_free: (a: number, b: number) => void;
export const digits_count: (a: number) => number;
export const digits_image: (a: number, b: number) => [number, number];
export const digits_label: (a: number, b: number) => number;
export const digits_new: () => [number, number, number];
export const digits_perturb: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const digits_side: (a: number) => number;
export const gumbel_explore: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const karatedemo_adjacency: (a: number) => [number, number, number, number];
export const karatedemo_epochs_done: (a: number) => number;
export const karatedemo_metrics: (a: number) => [number, number, number, number];
export const karatedemo_new: (a: number, b: number, c: number) => [number, number, number];
export const karatedemo_nodes: (a: number) => number;
export const karatedemo_train: (a: number, b: number) => [number, number, number];
export const karatedemo_truth: (a: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
