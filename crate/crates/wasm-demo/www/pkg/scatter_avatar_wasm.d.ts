/* tslint:disable */
/* eslint-disable */

/**
 * Reflectance times cosine for incident directions swept across the plane
 * of incidence, `samples` values from grazing on the far side to grazing on
 * the mirror side, for a white surface.
 */
export function brdf_slice(roughness: number, metallic: number, view_degrees: number, samples: number): Float64Array;

/**
 * The articulated capsule figure with arms lowered by `arm_angle`, seen
 * from `view_azimuth`, in one of the render modes.
 */
export function render_figure(size: number, arm_angle: number, view_azimuth: number, mode: string): Uint8Array;

/**
 * Physically based render of a sphere with the given material under a key
 * light, as `size × size` RGBA8.
 */
export function render_sphere(size: number, red: number, green: number, blue: number, roughness: number, metallic: number, light_azimuth: number, light_elevation: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly brdf_slice: (a: number, b: number, c: number, d: number) => [number, number];
    readonly render_figure: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly render_sphere: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
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
