/**
 * Minimal safetensors reader.
 *
 * Layout: u64 little-endian header length, a JSON header mapping tensor
 * names to {dtype, shape, data_offsets}, then the raw tensor bytes. Offsets
 * are relative to the end of the header. Only F32 tensors are supported;
 * that is what public ViT checkpoints and the test fixtures use.
 */

import * as fs from 'fs';

export interface SourceTensor {
  shape: number[];
  data: Float32Array;
}

export class SafetensorsError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'SafetensorsError';
  }
}

interface HeaderEntry {
  dtype: string;
  shape: number[];
  data_offsets: [number, number];
}

export function readSafetensors(path: string): Map<string, SourceTensor> {
  const buf = fs.readFileSync(path);
  if (buf.length < 8) {
    throw new SafetensorsError(`file too short for a header: ${path}`);
  }
  const headerLen = Number(buf.readBigUInt64LE(0));
  if (8 + headerLen > buf.length) {
    throw new SafetensorsError(
      `header length ${headerLen} exceeds file size ${buf.length}`,
    );
  }
  let header: Record<string, HeaderEntry>;
  try {
    header = JSON.parse(buf.subarray(8, 8 + headerLen).toString('utf-8'));
  } catch (err) {
    throw new SafetensorsError(`header is not valid JSON: ${(err as Error).message}`);
  }

  const body = buf.subarray(8 + headerLen);
  const tensors = new Map<string, SourceTensor>();
  for (const [name, entry] of Object.entries(header)) {
    if (name === '__metadata__') {
      continue;
    }
    if (entry.dtype !== 'F32') {
      throw new SafetensorsError(
        `tensor "${name}" has dtype ${entry.dtype}; only F32 is supported`,
      );
    }
    const [start, end] = entry.data_offsets;
    const count = entry.shape.reduce((a, d) => a * d, 1);
    if (end - start !== count * 4) {
      throw new SafetensorsError(
        `tensor "${name}": offsets span ${end - start} bytes but shape ` +
        `[${entry.shape.join(', ')}] needs ${count * 4}`,
      );
    }
    if (start < 0 || end > body.length) {
      throw new SafetensorsError(`tensor "${name}": offsets outside the file`);
    }
    // copy out so alignment never depends on the header length
    const bytes = Uint8Array.prototype.slice.call(body, start, end);
    tensors.set(name, {
      shape: entry.shape.slice(),
      data: new Float32Array(bytes.buffer, 0, count),
    });
  }
  return tensors;
}
