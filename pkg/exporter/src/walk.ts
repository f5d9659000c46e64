/**
 * Walk a tfjs LayersModel and translate it into interchange descriptors.
 *
 * Supported layer classes: InputLayer, Conv2D (linear activation),
 * Dense (linear), BatchNormalization (channel axis), ReLU /
 * Activation('relu'), GlobalAveragePooling2D, Add, and ZeroPadding2D
 * (symmetric, folded into the consuming conv). Anything else aborts with
 * a list of the offending layers. A softmax cross-entropy node is
 * appended after the model's logits output.
 */

import * as tf from "@tensorflow/tfjs";
import {
  BundleTensor,
  LayerJson,
  convKernelToBundle,
  denseKernelToBundle,
} from "./interchange.js";

export interface WalkResult {
  layers: LayerJson[];
  tensors: BundleTensor[];
  /** framework layer name -> interchange layer id (identity today) */
  nameMap: Record<string, string>;
  inputShape: { c: number; h: number; w: number };
  numClasses: number;
  lossId: string;
}

type AnyLayer = tf.layers.Layer;

function predecessorsOf(layer: AnyLayer): AnyLayer[] {
  const nodes = (layer as any).inboundNodes;
  if (!nodes || nodes.length === 0) return [];
  return nodes[0].inboundLayers as AnyLayer[];
}

function weightData(layer: AnyLayer): Float32Array[] {
  return layer.getWeights().map((t) => t.dataSync() as Float32Array);
}

export function walkModel(model: tf.LayersModel): WalkResult {
  const unsupported: string[] = [];
  const layers: LayerJson[] = [];
  const tensors: BundleTensor[] = [];
  const nameMap: Record<string, string> = {};
  // ZeroPadding2D folding: padder name -> (its predecessor, padding)
  const folded = new Map<string, { pred: string; pad: number }>();
  let inputShape = { c: 0, h: 0, w: 0 };

  if (model.outputs.length !== 1) {
    throw new Error("exporter needs a single-output model");
  }
  const outputLayer = (model as any).outputLayers[0] as AnyLayer;

  for (const layer of model.layers) {
    const cls = layer.getClassName();
    const cfg = layer.getConfig() as any;
    const preds = predecessorsOf(layer).map((p) => p.name);
    // only a valid-padding conv may consume a folded ZeroPadding2D output
    const requirePlainPreds = () => preds.map((p) => {
      if (folded.has(p)) {
        throw new Error(
          `zero-padding layer '${p}' must feed exactly one valid-padding conv`);
      }
      return p;
    });

    if (cls === "InputLayer") {
      const shape = cfg.batchInputShape as (number | null)[];
      if (shape.length !== 4) {
        unsupported.push(`${layer.name} (${cls}: input must be 4-d NHWC)`);
        continue;
      }
      inputShape = { h: shape[1]!, w: shape[2]!, c: shape[3]! };
      layers.push({
        id: layer.name, kind: "input", predecessors: [],
        channels: inputShape.c, height: inputShape.h, width: inputShape.w,
      });
    } else if (cls === "ZeroPadding2D") {
      const p = cfg.padding;
      const flat = Array.isArray(p) ? (p as number[][]).flat() : [p, p, p, p];
      if (new Set(flat).size !== 1) {
        unsupported.push(`${layer.name} (${cls}: asymmetric padding)`);
        continue;
      }
      folded.set(layer.name, { pred: preds[0], pad: flat[0] });
      continue;
    } else if (cls === "Conv2D") {
      const [kh, kw] = cfg.kernelSize as [number, number];
      const [sh, sw] = cfg.strides as [number, number];
      if (sh !== sw) {
        unsupported.push(`${layer.name} (${cls}: unequal strides)`);
        continue;
      }
      if ((cfg.activation ?? "linear") !== "linear") {
        unsupported.push(`${layer.name} (${cls}: fused activation '${cfg.activation}')`);
        continue;
      }
      let pad: number;
      let pred = preds[0];
      const fold = folded.get(pred);
      if (fold) {
        if (cfg.padding !== "valid") {
          unsupported.push(`${layer.name} (${cls}: padded conv after explicit padding)`);
          continue;
        }
        pad = fold.pad;
        pred = fold.pred;
        folded.delete(preds[0]);
      } else if (cfg.padding === "valid") {
        pad = 0;
      } else if (cfg.padding === "same" && sh === 1 && kh % 2 === 1 && kw === kh) {
        pad = (kh - 1) / 2;
      } else {
        unsupported.push(`${layer.name} (${cls}: padding '${cfg.padding}' with stride ${sh})`);
        continue;
      }
      const w = weightData(layer);
      const kernel = w[0];
      const kshape = layer.getWeights()[0].shape; // [kh, kw, in, out]
      const cin = kshape[2]!, cout = kshape[3]!;
      layers.push({
        id: layer.name, kind: "conv2d", predecessors: [pred],
        kernel_h: kh, kernel_w: kw, stride: sh, padding: pad,
        in_channels: cin, out_channels: cout, prunable: true,
      });
      tensors.push({
        layer: layer.name, tensor: "kernel", shape: [cout, cin, kh, kw],
        data: convKernelToBundle(kernel, kh, kw, cin, cout),
      });
      tensors.push({
        layer: layer.name, tensor: "bias", shape: [cout],
        data: cfg.useBias ? w[1] : new Float32Array(cout),
      });
    } else if (cls === "Dense") {
      if ((cfg.activation ?? "linear") !== "linear") {
        unsupported.push(`${layer.name} (${cls}: fused activation '${cfg.activation}')`);
        continue;
      }
      const w = weightData(layer);
      const kshape = layer.getWeights()[0].shape; // [in, out]
      const cin = kshape[0]!, cout = kshape[1]!;
      layers.push({
        id: layer.name, kind: "dense", predecessors: requirePlainPreds(),
        in_channels: cin, out_channels: cout,
        prunable: layer.name !== outputLayer.name,
      });
      tensors.push({
        layer: layer.name, tensor: "kernel", shape: [cout, cin],
        data: denseKernelToBundle(w[0], cin, cout),
      });
      tensors.push({
        layer: layer.name, tensor: "bias", shape: [cout],
        data: cfg.useBias ? w[1] : new Float32Array(cout),
      });
    } else if (cls === "BatchNormalization") {
      const axis = cfg.axis ?? -1;
      if (axis !== -1 && axis !== 3) {
        unsupported.push(`${layer.name} (${cls}: axis ${axis})`);
        continue;
      }
      const all = layer.getWeights();
      const c = all[0].shape[0]!;
      const named: Record<string, Float32Array> = {};
      // getWeights order: [gamma?][beta?][movingMean][movingVariance]
      let i = 0;
      named["scale"] = cfg.scale === false ? new Float32Array(c).fill(1)
        : (all[i++].dataSync() as Float32Array);
      named["shift"] = cfg.center === false ? new Float32Array(c)
        : (all[i++].dataSync() as Float32Array);
      named["running_mean"] = all[i++].dataSync() as Float32Array;
      named["running_var"] = all[i++].dataSync() as Float32Array;
      layers.push({
        id: layer.name, kind: "batchnorm", predecessors: requirePlainPreds(),
        epsilon: cfg.epsilon ?? 1e-3,
      });
      for (const [tensor, data] of Object.entries(named)) {
        tensors.push({ layer: layer.name, tensor, shape: [c], data });
      }
    } else if (cls === "ReLU" ||
               (cls === "Activation" && (cfg.activation === "relu"))) {
      layers.push({ id: layer.name, kind: "relu", predecessors: requirePlainPreds() });
    } else if (cls === "GlobalAveragePooling2D") {
      layers.push({ id: layer.name, kind: "global_avg_pool",
                    predecessors: requirePlainPreds() });
    } else if (cls === "Add") {
      if (preds.length !== 2) {
        unsupported.push(`${layer.name} (${cls}: needs exactly two inputs)`);
        continue;
      }
      layers.push({ id: layer.name, kind: "add", predecessors: requirePlainPreds() });
    } else {
      unsupported.push(`${layer.name} (${cls})`);
      continue;
    }
    nameMap[layer.name] = layer.name;
  }

  if (unsupported.length > 0) {
    throw new Error(`unsupported layers: ${unsupported.join(", ")}`);
  }
  const logits = outputLayer.name;
  const numClasses = (model.outputs[0].shape as number[])[1];
  layers.push({ id: "loss", kind: "softmax_ce", predecessors: [logits] });
  return { layers, tensors, nameMap, inputShape, numClasses, lossId: "loss" };
}
