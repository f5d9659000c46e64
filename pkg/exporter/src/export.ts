/**
 * Export a tfjs model, a seeded batch, and the batch gradients into the
 * interchange layout:
 *
 *   out/model/   model.json + weight blobs (float32, [out,in,kh,kw] kernels)
 *   out/data/    data.json + inputs [N,C,H,W] + int64 labels
 *   out/grads/   one blob per trainable tensor, bundle layouts
 *   out/manifest.json   framework/version, name map, checksums, batch info
 *
 * Usage:
 *   tsx src/export.ts --model toy2conv --batch-size 64 --split train \
 *       --seed 0 --out DIR
 */

import * as tf from "@tensorflow/tfjs";
import { mkdirSync, writeFileSync } from "node:fs";
import { join } from "node:path";
import {
  convKernelToBundle,
  denseKernelToBundle,
  nhwcToNchw,
  writeBlob,
  writeDataset,
  writeModelBundle,
} from "./interchange.js";
import { lossAndGradients, modelLoss } from "./gradients.js";
import { MODELS } from "./models.js";
import { Prng } from "./prng.js";
import { walkModel } from "./walk.js";

export interface ExportOptions {
  model: string;
  batchSize: number;
  split: "train" | "eval";
  seed: number;
  out: string;
}

export interface ExportSummary {
  loss: number;
  numFilters: number;
  manifestPath: string;
}

export function makeBatch(
  rng: Prng, n: number, c: number, h: number, w: number, classes: number,
): { nhwc: Float32Array; labels: Int32Array } {
  const nhwc = new Float32Array(n * h * w * c);
  for (let i = 0; i < nhwc.length; i++) nhwc[i] = rng.normal();
  const labels = new Int32Array(n);
  for (let i = 0; i < n; i++) labels[i] = rng.int(classes);
  return { nhwc, labels };
}

export function runExport(opts: ExportOptions): ExportSummary {
  const builder = MODELS[opts.model];
  if (!builder) {
    throw new Error(
      `unknown model '${opts.model}' (have: ${Object.keys(MODELS).join(", ")})`);
  }
  const model = builder(opts.seed);
  const walked = walkModel(model);
  const { c, h, w } = walked.inputShape;

  // batch seed folds in the split so train/eval batches differ
  const rng = new Prng(opts.seed * 7919 + (opts.split === "train" ? 0 : 1));
  const batch = makeBatch(rng, opts.batchSize, c, h, w, walked.numClasses);
  const inputs = tf.tensor4d(batch.nhwc, [opts.batchSize, h, w, c]);

  const modelDir = join(opts.out, "model");
  const dataDir = join(opts.out, "data");
  const gradDir = join(opts.out, "grads");
  mkdirSync(gradDir, { recursive: true });

  const modelChecksums = writeModelBundle(modelDir, walked.layers, walked.tensors);
  const dataChecksums = writeDataset(
    dataDir, nhwcToNchw(batch.nhwc, opts.batchSize, h, w, c),
    [opts.batchSize, c, h, w], batch.labels);

  const { loss, grads } = lossAndGradients(model, inputs, batch.labels,
                                           walked.numClasses);
  const gradChecksums: Record<string, string> = {};
  const gradEntries: object[] = [];
  for (const g of grads) {
    let data = g.values;
    let shape = g.shape;
    if (g.tensor === "kernel" && g.shape.length === 4) {
      const [kh, kw, cin, cout] = g.shape;
      data = convKernelToBundle(g.values, kh, kw, cin, cout);
      shape = [cout, cin, kh, kw];
    } else if (g.tensor === "kernel" && g.shape.length === 2) {
      const [cin, cout] = g.shape;
      data = denseKernelToBundle(g.values, cin, cout);
      shape = [cout, cin];
    }
    const file = `${g.layer}.${g.tensor}.grad.bin`;
    gradChecksums[file] = writeBlob(gradDir, file, data);
    gradEntries.push({ layer: g.layer, tensor: g.tensor, shape,
                       dtype: "f32", file });
  }

  const manifest = {
    format_version: 1,
    framework: `tfjs ${tf.version.tfjs}`,
    model: opts.model,
    layer_name_map: walked.nameMap,
    batch: { size: opts.batchSize, split: opts.split, seed: opts.seed },
    source_loss: loss,
    checksums: {
      model: modelChecksums,
      data: dataChecksums,
      grads: gradChecksums,
    },
    gradients: gradEntries,
  };
  const manifestPath = join(opts.out, "manifest.json");
  writeFileSync(manifestPath, JSON.stringify(manifest, null, 2) + "\n");
  inputs.dispose();

  const numFilters = walked.layers
    .filter((l) => l.prunable)
    .reduce((acc, l) => acc + (l.out_channels as number), 0);
  return { loss, numFilters, manifestPath };
}

function parseArgs(argv: string[]): ExportOptions {
  const opts: ExportOptions = {
    model: "toy2conv", batchSize: 64, split: "train", seed: 0, out: "export_out",
  };
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i], val = argv[i + 1];
    if (val === undefined) throw new Error(`missing value for ${key}`);
    switch (key) {
      case "--model": opts.model = val; break;
      case "--batch-size": opts.batchSize = Number(val); break;
      case "--split":
        if (val !== "train" && val !== "eval") throw new Error("--split train|eval");
        opts.split = val; break;
      case "--seed": opts.seed = Number(val); break;
      case "--out": opts.out = val; break;
      default: throw new Error(`unknown flag ${key}`);
    }
  }
  return opts;
}

const entry = process.argv[1] ?? "";
if (entry.endsWith("export.ts") || entry.endsWith("export.js")) {
  const summary = runExport(parseArgs(process.argv.slice(2)));
  console.log(JSON.stringify(summary, null, 2));
}
