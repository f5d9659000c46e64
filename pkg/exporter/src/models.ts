/** Built-in toy models for export, all seeded and logits-valued. */

import * as tf from "@tensorflow/tfjs";

export type ModelBuilder = (seed: number) => tf.LayersModel;

function init(seed: number) {
  return tf.initializers.glorotUniform({ seed });
}

/** conv -> relu -> conv -> relu -> gap -> dense logits */
export function toy2conv(seed: number): tf.LayersModel {
  const input = tf.input({ shape: [8, 8, 3], name: "image" });
  let x = tf.layers
    .conv2d({ name: "conv_a", filters: 6, kernelSize: 3, padding: "same",
              kernelInitializer: init(seed), biasInitializer: init(seed + 1) })
    .apply(input) as tf.SymbolicTensor;
  x = tf.layers.reLU({ name: "relu_a" }).apply(x) as tf.SymbolicTensor;
  x = tf.layers
    .conv2d({ name: "conv_b", filters: 5, kernelSize: 3, padding: "same",
              kernelInitializer: init(seed + 2), biasInitializer: init(seed + 3) })
    .apply(x) as tf.SymbolicTensor;
  x = tf.layers.reLU({ name: "relu_b" }).apply(x) as tf.SymbolicTensor;
  x = tf.layers.globalAveragePooling2d({ name: "gap" }).apply(x) as tf.SymbolicTensor;
  const logits = tf.layers
    .dense({ name: "logits", units: 4, kernelInitializer: init(seed + 4) })
    .apply(x) as tf.SymbolicTensor;
  return tf.model({ inputs: input, outputs: logits, name: "toy2conv" });
}

/** stem conv -> bn -> relu, residual conv -> bn, add, strided stage, logits */
export function resmini(seed: number): tf.LayersModel {
  const input = tf.input({ shape: [10, 10, 3], name: "image" });
  let stem = tf.layers
    .conv2d({ name: "stem", filters: 6, kernelSize: 3, padding: "same",
              kernelInitializer: init(seed) })
    .apply(input) as tf.SymbolicTensor;
  stem = tf.layers.batchNormalization({ name: "stem_bn" }).apply(stem) as tf.SymbolicTensor;
  stem = tf.layers.reLU({ name: "stem_relu" }).apply(stem) as tf.SymbolicTensor;
  let branch = tf.layers
    .conv2d({ name: "branch", filters: 6, kernelSize: 3, padding: "same",
              kernelInitializer: init(seed + 1) })
    .apply(stem) as tf.SymbolicTensor;
  branch = tf.layers.batchNormalization({ name: "branch_bn" }).apply(branch) as tf.SymbolicTensor;
  let joined = tf.layers.add({ name: "join" }).apply([stem, branch]) as tf.SymbolicTensor;
  joined = tf.layers.reLU({ name: "join_relu" }).apply(joined) as tf.SymbolicTensor;
  // stride-2 stage via explicit symmetric padding + valid conv
  let down = tf.layers
    .zeroPadding2d({ name: "pad", padding: [[1, 1], [1, 1]] })
    .apply(joined) as tf.SymbolicTensor;
  down = tf.layers
    .conv2d({ name: "down", filters: 8, kernelSize: 3, strides: 2, padding: "valid",
              kernelInitializer: init(seed + 2) })
    .apply(down) as tf.SymbolicTensor;
  down = tf.layers.reLU({ name: "down_relu" }).apply(down) as tf.SymbolicTensor;
  const pooled = tf.layers.globalAveragePooling2d({ name: "gap" })
    .apply(down) as tf.SymbolicTensor;
  const logits = tf.layers
    .dense({ name: "logits", units: 3, kernelInitializer: init(seed + 3) })
    .apply(pooled) as tf.SymbolicTensor;
  return tf.model({ inputs: input, outputs: logits, name: "resmini" });
}

/** contains a layer kind the interchange format cannot express */
export function unsupportedToy(seed: number): tf.LayersModel {
  const input = tf.input({ shape: [8, 8, 3], name: "image" });
  let x = tf.layers
    .conv2d({ name: "conv_a", filters: 4, kernelSize: 3, padding: "same",
              kernelInitializer: init(seed) })
    .apply(input) as tf.SymbolicTensor;
  x = tf.layers.maxPooling2d({ name: "maxpool", poolSize: 2 }).apply(x) as tf.SymbolicTensor;
  x = tf.layers.flatten({ name: "flat" }).apply(x) as tf.SymbolicTensor;
  const logits = tf.layers
    .dense({ name: "logits", units: 2, kernelInitializer: init(seed + 1) })
    .apply(x) as tf.SymbolicTensor;
  return tf.model({ inputs: input, outputs: logits, name: "unsupported" });
}

export const MODELS: Record<string, ModelBuilder> = {
  toy2conv,
  resmini,
  unsupported: unsupportedToy,
};
