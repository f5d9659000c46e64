/**
 * Writers for the interchange bundle consumed by the pruning library.
 *
 * A model bundle is `model.json` plus one raw little-endian float32 blob
 * per tensor (row-major). Conv kernels are stored [out, in, kh, kw] and
 * dense kernels [out, in]; activations and datasets are channels-first.
 */

import { createHash } from "node:crypto";
import { mkdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";

export const FORMAT_VERSION = 1;

export interface LayerJson {
  id: string;
  kind: string;
  predecessors: string[];
  [key: string]: unknown;
}

export interface TensorEntry {
  name: string;
  layer: string;
  tensor: string;
  shape: number[];
  dtype: "f32";
  file: string;
}

export interface BundleTensor {
  layer: string;
  tensor: string;
  shape: number[];
  data: Float32Array;
}

export function writeBlob(dir: string, file: string, data: Float32Array): string {
  const buf = Buffer.alloc(data.length * 4);
  for (let i = 0; i < data.length; i++) buf.writeFloatLE(data[i], i * 4);
  writeFileSync(join(dir, file), buf);
  return createHash("sha256").update(buf).digest("hex");
}

export function writeModelBundle(
  dir: string,
  layers: LayerJson[],
  tensors: BundleTensor[],
): Record<string, string> {
  mkdirSync(dir, { recursive: true });
  const checksums: Record<string, string> = {};
  const entries: TensorEntry[] = [];
  for (const t of tensors) {
    const file = `${t.layer}.${t.tensor}.bin`;
    checksums[file] = writeBlob(dir, file, t.data);
    entries.push({
      name: `${t.layer}.${t.tensor}`,
      layer: t.layer,
      tensor: t.tensor,
      shape: t.shape,
      dtype: "f32",
      file,
    });
  }
  const manifest = { format_version: FORMAT_VERSION, layers, tensors: entries };
  writeFileSync(join(dir, "model.json"), JSON.stringify(manifest, null, 2) + "\n");
  return checksums;
}

/** Inputs are [N, C, H, W] float32, labels little-endian int64. */
export function writeDataset(
  dir: string,
  inputsNchw: Float32Array,
  shape: number[],
  labels: Int32Array,
): Record<string, string> {
  mkdirSync(dir, { recursive: true });
  const checksums: Record<string, string> = {};
  checksums["inputs.bin"] = writeBlob(dir, "inputs.bin", inputsNchw);
  const lbuf = Buffer.alloc(labels.length * 8);
  for (let i = 0; i < labels.length; i++) lbuf.writeBigInt64LE(BigInt(labels[i]), i * 8);
  writeFileSync(join(dir, "labels.bin"), lbuf);
  checksums["labels.bin"] = createHash("sha256").update(lbuf).digest("hex");
  const manifest = {
    format_version: FORMAT_VERSION,
    inputs: { shape, dtype: "f32", file: "inputs.bin" },
    labels: { shape: [labels.length], dtype: "i64", file: "labels.bin" },
  };
  writeFileSync(join(dir, "data.json"), JSON.stringify(manifest, null, 2) + "\n");
  return checksums;
}

/** NHWC activation buffer -> NCHW, both row-major float32. */
export function nhwcToNchw(
  src: Float32Array,
  n: number,
  h: number,
  w: number,
  c: number,
): Float32Array {
  const out = new Float32Array(src.length);
  for (let b = 0; b < n; b++)
    for (let y = 0; y < h; y++)
      for (let x = 0; x < w; x++)
        for (let ch = 0; ch < c; ch++)
          out[((b * c + ch) * h + y) * w + x] = src[((b * h + y) * w + x) * c + ch];
  return out;
}

/** tfjs conv kernel [kh, kw, in, out] -> bundle layout [out, in, kh, kw]. */
export function convKernelToBundle(
  src: Float32Array,
  kh: number,
  kw: number,
  cin: number,
  cout: number,
): Float32Array {
  const out = new Float32Array(src.length);
  for (let u = 0; u < kh; u++)
    for (let v = 0; v < kw; v++)
      for (let i = 0; i < cin; i++)
        for (let o = 0; o < cout; o++)
          out[((o * cin + i) * kh + u) * kw + v] = src[((u * kw + v) * cin + i) * cout + o];
  return out;
}

/** tfjs dense kernel [in, out] -> bundle layout [out, in]. */
export function denseKernelToBundle(
  src: Float32Array,
  cin: number,
  cout: number,
): Float32Array {
  const out = new Float32Array(src.length);
  for (let i = 0; i < cin; i++)
    for (let o = 0; o < cout; o++) out[o * cin + i] = src[i * cout + o];
  return out;
}
