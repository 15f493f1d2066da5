/**
 * Checkpoint conversion: upstream ViT safetensors to the canonical archive.
 *
 * Every tensor the variant inventory expects must be present with its exact
 * shape; source tensors outside the inventory (classifier heads, EMA
 * copies) are listed as unmapped in the report and never exported, never
 * silently dropped.
 */

import { ArchiveTensor, writeArchive } from './archive';
import { MapRule, Transform, buildNameMap, getVariant } from './names';
import { SourceTensor, readSafetensors } from './safetensors';

export interface ExportReport {
  variant: string;
  mapped: string[];
  unmapped: string[];
  byteLength: number;
  checksum: string;
}

export class MissingTensorError extends Error {
  constructor(name: string, variant: string) {
    super(`checkpoint is missing expected tensor "${name}" (variant ${variant})`);
    this.name = 'MissingTensorError';
  }
}

export class TensorShapeError extends Error {
  constructor(name: string, expected: number[], actual: number[]) {
    super(
      `tensor "${name}": expected shape [${expected.join(', ')}] but ` +
      `checkpoint has [${actual.join(', ')}]`,
    );
    this.name = 'TensorShapeError';
  }
}

function sameShape(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((d, i) => d === b[i]);
}

export function transpose2d(data: Float32Array, rows: number, cols: number): Float32Array {
  const out = new Float32Array(data.length);
  for (let i = 0; i < rows; i++) {
    for (let j = 0; j < cols; j++) {
      out[j * rows + i] = data[i * cols + j];
    }
  }
  return out;
}

/** (1, T+1, C) with the class row first becomes (T+1, C) with it last. */
export function rotateClsRowLast(data: Float32Array, dim: number): Float32Array {
  const out = new Float32Array(data.length);
  out.set(data.subarray(dim), 0);
  out.set(data.subarray(0, dim), data.length - dim);
  return out;
}

/**
 * Conv patch projection (C_out, C_in, P, P) becomes a flat matrix
 * (P*P*C_in, C_out) whose row order matches row-major patch flattening
 * (patch row, patch column, channel).
 */
export function unrollPatchProj(
  data: Float32Array,
  cOut: number,
  cIn: number,
  patch: number,
): Float32Array {
  const out = new Float32Array(data.length);
  for (let co = 0; co < cOut; co++) {
    for (let ci = 0; ci < cIn; ci++) {
      for (let p = 0; p < patch; p++) {
        for (let q = 0; q < patch; q++) {
          const srcIdx = ((co * cIn + ci) * patch + p) * patch + q;
          const row = (p * patch + q) * cIn + ci;
          out[row * cOut + co] = data[srcIdx];
        }
      }
    }
  }
  return out;
}

function applyTransform(
  transform: Transform,
  rule: MapRule,
  tensor: SourceTensor,
): Float32Array {
  switch (transform) {
    case 'copy':
    case 'clsToken':
      return tensor.data;
    case 'transpose2d':
      return transpose2d(tensor.data, rule.srcShape[0], rule.srcShape[1]);
    case 'posEmbed':
      return rotateClsRowLast(tensor.data, rule.srcShape[2]);
    case 'patchProj':
      return unrollPatchProj(
        tensor.data, rule.srcShape[0], rule.srcShape[1], rule.srcShape[2],
      );
  }
}

export function exportCheckpoint(
  srcPath: string,
  variantName: string,
  outPrefix: string,
): ExportReport {
  const variant = getVariant(variantName);
  const source = readSafetensors(srcPath);
  const rules = buildNameMap(variant);

  const converted: ArchiveTensor[] = [];
  const consumed = new Set<string>();
  for (const rule of rules) {
    const tensor = source.get(rule.src);
    if (!tensor) {
      throw new MissingTensorError(rule.src, variant.name);
    }
    if (!sameShape(tensor.shape, rule.srcShape)) {
      throw new TensorShapeError(rule.src, rule.srcShape, tensor.shape);
    }
    consumed.add(rule.src);
    converted.push({
      name: rule.dst,
      shape: rule.dstShape.slice(),
      data: applyTransform(rule.transform, rule, tensor),
    });
  }

  const unmapped = [...source.keys()].filter((n) => !consumed.has(n)).sort();
  const checksum = writeArchive(outPrefix, converted, {
    source: 'vit-archive-export',
    variant: variant.name,
    unmapped,
  });
  const byteLength = converted.reduce((a, t) => a + t.data.length * 4, 0);
  return {
    variant: variant.name,
    mapped: converted.map((t) => t.name),
    unmapped,
    byteLength,
    checksum,
  };
}
