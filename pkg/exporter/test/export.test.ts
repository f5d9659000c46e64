/**
 * Exporter contract tests.
 *
 * The round-trip checks drive the pruning engine through its public CLI
 * (`python3 -m prunekit.cli ...`) on the exported artifacts, so they
 * exercise exactly the interchange surface a real consumer would.
 */

import { execFileSync } from "node:child_process";
import { createHash } from "node:crypto";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import * as tf from "@tensorflow/tfjs";
import { beforeAll, describe, expect, it } from "vitest";

import { runExport } from "../src/export.js";
import { lossAndGradients } from "../src/gradients.js";
import { toy2conv } from "../src/models.js";
import { walkModel } from "../src/walk.js";

function pythonCli(args: string[]): string {
  return execFileSync("python3", ["-m", "prunekit.cli", ...args], {
    encoding: "utf8",
  });
}

function freshDir(tag: string): string {
  return mkdtempSync(join(tmpdir(), `prunekit-export-${tag}-`));
}

describe("toy model export", () => {
  let out: string;
  let summary: { loss: number; numFilters: number; manifestPath: string };

  beforeAll(() => {
    out = freshDir("toy");
    summary = runExport({
      model: "toy2conv", batchSize: 48, split: "train", seed: 3, out,
    });
  });

  it("bundle loads and filter count matches the source model", () => {
    const report = JSON.parse(
      pythonCli(["eval", "--model", join(out, "model"),
                 "--data", join(out, "data")]));
    expect(summary.numFilters).toBe(6 + 5);
    // conv_a 10368 + conv_b 17280 + logits 20 MACs
    expect(report.macs.total).toBe(27668);
  });

  it("engine loss matches the tfjs loss within 1e-4", () => {
    const report = JSON.parse(
      pythonCli(["eval", "--model", join(out, "model"),
                 "--data", join(out, "data")]));
    expect(Math.abs(report.loss - summary.loss)).toBeLessThan(1e-4);
  });

  it("manifest checksums match the blobs on disk", () => {
    const manifest = JSON.parse(readFileSync(summary.manifestPath, "utf8"));
    for (const [sub, sums] of Object.entries(manifest.checksums) as
         [string, Record<string, string>][]) {
      const dir = sub === "model" ? "model" : sub === "data" ? "data" : "grads";
      for (const [file, expected] of Object.entries(sums)) {
        const digest = createHash("sha256")
          .update(readFileSync(join(out, dir, file))).digest("hex");
        expect(digest).toBe(expected);
      }
      expect(Object.keys(sums).length).toBeGreaterThan(0);
    }
    expect(manifest.framework).toContain("tfjs");
    expect(manifest.batch).toEqual({ size: 48, split: "train", seed: 3 });
  });

  it("every exported tensor has a checksum and the name map is a bijection", () => {
    const manifest = JSON.parse(readFileSync(summary.manifestPath, "utf8"));
    const modelJson = JSON.parse(
      readFileSync(join(out, "model", "model.json"), "utf8"));
    for (const entry of modelJson.tensors) {
      expect(manifest.checksums.model[entry.file]).toBeTruthy();
    }
    const names = Object.keys(manifest.layer_name_map);
    const ids = Object.values(manifest.layer_name_map);
    expect(new Set(ids).size).toBe(names.length);
  });
});

describe("residual model export", () => {
  it("bundle with add + folded padding loads and evaluates", () => {
    const out = freshDir("res");
    const summary = runExport({
      model: "resmini", batchSize: 32, split: "eval", seed: 7, out,
    });
    expect(summary.numFilters).toBe(6 + 6 + 8);
    const report = JSON.parse(
      pythonCli(["eval", "--model", join(out, "model"),
                 "--data", join(out, "data")]));
    expect(Math.abs(report.loss - summary.loss)).toBeLessThan(1e-4);
  });
});

describe("unsupported layers", () => {
  it("are rejected with the offenders listed", () => {
    const out = freshDir("bad");
    expect(() => runExport({
      model: "unsupported", batchSize: 8, split: "train", seed: 0, out,
    })).toThrow(/maxpool/);
  });
});

describe("gradients", () => {
  it("are shape-congruent with the exported weights", () => {
    const out = freshDir("grads");
    const summary = runExport({
      model: "toy2conv", batchSize: 16, split: "train", seed: 1, out,
    });
    const manifest = JSON.parse(readFileSync(summary.manifestPath, "utf8"));
    const modelJson = JSON.parse(
      readFileSync(join(out, "model", "model.json"), "utf8"));
    const weightShapes = new Map<string, number[]>(
      modelJson.tensors.map((t: any) => [t.name, t.shape]));
    expect(manifest.gradients.length).toBeGreaterThan(0);
    for (const g of manifest.gradients) {
      expect(g.shape).toEqual(weightShapes.get(`${g.layer}.${g.tensor}`));
      const blob = readFileSync(join(out, "grads", g.file));
      const count = g.shape.reduce((a: number, b: number) => a * b, 1);
      expect(blob.length).toBe(count * 4);
    }
  });

  it("vanish upstream of a zeroed final layer", () => {
    const model = toy2conv(5);
    const logits = model.getLayer("logits");
    logits.setWeights(logits.getWeights().map((t) => tf.zerosLike(t)));
    const walked = walkModel(model);
    const xs = tf.randomNormal([8, 8, 8, 3], 0, 1, "float32", 11) as tf.Tensor4D;
    const labels = new Int32Array([0, 1, 2, 3, 0, 1, 2, 3]);
    const { grads } = lossAndGradients(model, xs, labels, walked.numClasses);
    expect(grads.length).toBeGreaterThan(2);
    for (const g of grads) {
      if (g.layer !== "logits") {
        for (const v of g.values) expect(v).toBe(0);
      }
    }
  });
});

describe("taylor metric round trip", () => {
  it("exported gradients reproduce the engine's taylor1 scores within 1e-3", () => {
    const out = freshDir("taylor");
    const batchSize = 40;
    runExport({ model: "toy2conv", batchSize, split: "train", seed: 9, out });
    const manifest = JSON.parse(
      readFileSync(join(out, "manifest.json"), "utf8"));
    const modelJson = JSON.parse(
      readFileSync(join(out, "model", "model.json"), "utf8"));

    const readBlob = (dir: string, file: string) => {
      const buf = readFileSync(join(out, dir, file));
      const arr = new Float32Array(buf.length / 4);
      for (let i = 0; i < arr.length; i++) arr[i] = buf.readFloatLE(i * 4);
      return arr;
    };

    // per-filter |mean(grad * weight)| from the exported artifacts, for
    // every prunable layer in graph order
    const expected: number[] = [];
    for (const layer of modelJson.layers) {
      if (!layer.prunable) continue;
      const w = readBlob("model", `${layer.id}.kernel.bin`);
      const g = readBlob("grads", `${layer.id}.kernel.grad.bin`);
      const cout = layer.out_channels;
      const slab = w.length / cout;
      for (let o = 0; o < cout; o++) {
        let acc = 0;
        for (let i = 0; i < slab; i++) acc += w[o * slab + i] * g[o * slab + i];
        expected.push(Math.abs(acc / slab));
      }
    }

    // the engine computes its own gradients on the same exported batch
    const csv = pythonCli([
      "diagnostics", "--model", join(out, "model"), "--data", join(out, "data"),
      "--metric", "taylor1", "--batch-size", String(batchSize),
    ]);
    const rows = csv.trim().split("\n").slice(1).map((r) => r.split(","));
    expect(rows.length).toBe(expected.length);
    for (let i = 0; i < rows.length; i++) {
      const engineValue = Number(rows[i][2]);
      const relErr = Math.abs(engineValue - expected[i]) /
        Math.max(Math.abs(engineValue), Math.abs(expected[i]), 1e-12);
      expect(relErr).toBeLessThan(1e-3);
    }
  });
});
