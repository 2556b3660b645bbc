/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const buildSuite: (a: number, b: number) => [number, number, number, number];
export const compareMethods: () => [number, number, number, number];
export const maskOverlap: (a: number) => [number, number, number, number];
export const stitchAt: (a: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
