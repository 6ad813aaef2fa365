/* tslint:disable */
/* eslint-disable */

/**
 * The 200 bundled test digits at 28x28.
 */
export class Digits {
    free(): void;
    [Symbol.dispose](): void;
    count(): number;
    image(index: number): Float64Array;
    label(index: number): number;
    constructor();
    /**
     * `noise` pixels replaced with uniform draws, then a white square of
     * side `block` pasted at a random position.
     */
    perturb(index: number, noise: number, block: number, seed: number): Float64Array;
    side(): number;
}

/**
 * A small SAG-VAE trained in the page on synthetic karate-club features.
 */
export class KarateDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Posterior-mean edge probabilities, row-major `n x n`.
     */
    adjacency(): Float64Array;
    epochs_done(): number;
    /**
     * `[precision, recall, f1]` of the learned graph, then of the
     * pairwise-product baseline.
     */
    metrics(): Float64Array;
    constructor(seed: number, samples_per_pattern: number, epochs: number);
    nodes(): number;
    /**
     * Runs `count` more epochs and returns the last mean total loss.
     */
    train(count: number): number;
    truth(): Float64Array;
}

/**
 * Relaxed two-class draws at class-0 probability `p0`. Returns
 * `[argmax frequency of class 0, fraction with max > 0.95, histogram of a_0
 * over 20 bins...]`.
 */
export function gumbel_explore(p0: number, tau: number, draws: number, seed: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_digits_free: (a: number, b: number) => void;
    readonly __wbg_karatedemo_free: (a: number, b: number) => void;
    readonly digits_count: (a: number) => number;
    readonly digits_image: (a: number, b: number) => [number, number];
    readonly digits_label: (a: number, b: number) => number;
    readonly digits_new: () => [number, number, number];
    readonly digits_perturb: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly digits_side: (a: number) => number;
    readonly gumbel_explore: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly karatedemo_adjacency: (a: number) => [number, number, number, number];
    readonly karatedemo_epochs_done: (a: number) => number;
    readonly karatedemo_metrics: (a: number) => [number, number, number, number];
    readonly karatedemo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly karatedemo_nodes: (a: number) => number;
    readonly karatedemo_train: (a: number, b: number) => [number, number, number];
    readonly karatedemo_truth: (a: number) => [number, number];
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
