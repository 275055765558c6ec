/* tslint:disable */
/* eslint-disable */

/**
 * Loss and its derivatives with respect to each similarity.
 */
export function nce(positives: string, negatives: string): string;

/**
 * Rendered prompt of the given kind (`kg`, `qa`, `ir` or `silver`). The
 * first line of `examples_jsonl` is the target; the rest are demonstrations.
 */
export function render_prompt(kind: string, examples_jsonl: string): string;

/**
 * Top-k entries of a toy knowledge base for a question, using the hash
 * encoder. `choices` holds one option per line.
 */
export function retrieve(kb_jsonl: string, question: string, choices: string, k: number, dim: number, seed: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly nce: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly render_prompt: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly retrieve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
