/** Loss and weight gradients of a tfjs model on one batch (inference-mode BN). */

import * as tf from "@tensorflow/tfjs";

export interface NamedGradient {
  layer: string;
  tensor: string; // kernel | bias | scale | shift
  values: Float32Array;
  shape: number[];
}

export interface GradientResult {
  loss: number;
  grads: NamedGradient[];
}

/** Trainable variables paired with interchange tensor names, model order.
 *
 * tfjs deduplicates variable names process-wide (`conv/kernel_3`), so the
 * mapping comes from layer structure, not from variable names.
 */
function trainableEntries(model: tf.LayersModel) {
  const entries: { layer: string; tensor: string; v: tf.Variable }[] = [];
  for (const layer of model.layers) {
    const cls = layer.getClassName();
    const cfg = layer.getConfig() as any;
    let kinds: string[] = [];
    if (cls === "Conv2D" || cls === "Dense") {
      kinds = cfg.useBias === false ? ["kernel"] : ["kernel", "bias"];
    } else if (cls === "BatchNormalization") {
      if (cfg.scale !== false) kinds.push("scale");
      if (cfg.center !== false) kinds.push("shift");
    }
    kinds.forEach((tensor, i) => {
      entries.push({
        layer: layer.name,
        tensor,
        v: (layer.trainableWeights[i] as any).val as tf.Variable,
      });
    });
  }
  return entries;
}

export function lossAndGradients(
  model: tf.LayersModel,
  inputsNhwc: tf.Tensor4D,
  labels: Int32Array,
  numClasses: number,
): GradientResult {
  const oneHot = tf.oneHot(tf.tensor1d(labels, "int32"), numClasses);
  const lossFn = () => {
    const logits = model.apply(inputsNhwc, { training: false }) as tf.Tensor2D;
    return tf.losses.softmaxCrossEntropy(oneHot, logits) as tf.Scalar;
  };
  const entries = trainableEntries(model);
  const { value, grads } = tf.variableGrads(lossFn, entries.map((e) => e.v));
  const named: NamedGradient[] = [];
  for (const e of entries) {
    const t = grads[e.v.name];
    if (t) {
      named.push({
        layer: e.layer,
        tensor: e.tensor,
        values: t.dataSync() as Float32Array,
        shape: t.shape.slice(),
      });
    }
  }
  const loss = value.dataSync()[0];
  value.dispose();
  oneHot.dispose();
  Object.values(grads).forEach((t) => t.dispose());
  return { loss, grads: named };
}

export function modelLoss(
  model: tf.LayersModel,
  inputsNhwc: tf.Tensor4D,
  labels: Int32Array,
  numClasses: number,
): number {
  return tf.tidy(() => {
    const logits = model.apply(inputsNhwc, { training: false }) as tf.Tensor2D;
    const oneHot = tf.oneHot(tf.tensor1d(labels, "int32"), numClasses);
    return tf.losses.softmaxCrossEntropy(oneHot, logits).dataSync()[0];
  });
}
