/** Shared test fixtures: safetensors writing and archive reading. */

import * as fs from 'fs';

export interface FixtureTensor {
  shape: number[];
  data: Float32Array;
}

/** Writes a minimal safetensors file from name -> tensor. */
export function writeSafetensors(
  path: string,
  tensors: Record<string, FixtureTensor>,
): void {
  const header: Record<string, unknown> = {};
  const blobs: Buffer[] = [];
  let offset = 0;
  for (const [name, t] of Object.entries(tensors)) {
    const bytes = Buffer.alloc(t.data.length * 4);
    const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
    for (let i = 0; i < t.data.length; i++) {
      view.setFloat32(i * 4, t.data[i], true);
    }
    header[name] = {
      dtype: 'F32',
      shape: t.shape,
      data_offsets: [offset, offset + bytes.length],
    };
    offset += bytes.length;
    blobs.push(bytes);
  }
  const headerJson = Buffer.from(JSON.stringify(header), 'utf-8');
  const lenPrefix = Buffer.alloc(8);
  lenPrefix.writeBigUInt64LE(BigInt(headerJson.length), 0);
  fs.writeFileSync(path, Buffer.concat([lenPrefix, headerJson, ...blobs]));
}

export interface ArchiveFile {
  entries: Array<{
    name: string;
    dtype: string;
    shape: number[];
    offset: number;
    byte_len: number;
  }>;
  meta?: Record<string, unknown>;
  tensors: Map<string, Float32Array>;
}

/** Reads back an exported archive pair for assertions. */
export function readArchive(prefix: string): ArchiveFile {
  const manifest = JSON.parse(
    fs.readFileSync(`${prefix}.manifest.json`, 'utf-8'),
  );
  const blob = fs.readFileSync(`${prefix}.bin`);
  const view = new DataView(blob.buffer, blob.byteOffset, blob.byteLength);
  const tensors = new Map<string, Float32Array>();
  for (const entry of manifest.entries) {
    const count = entry.byte_len / 4;
    const data = new Float32Array(count);
    for (let i = 0; i < count; i++) {
      data[i] = view.getFloat32(entry.offset + i * 4, true);
    }
    tensors.set(entry.name, data);
  }
  return { entries: manifest.entries, meta: manifest.meta, tensors };
}

/** Deterministic filler so transforms are checkable by index arithmetic. */
export function ramp(count: number, start = 0): Float32Array {
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    data[i] = Math.fround((start + i) * 0.01 - 1.5);
  }
  return data;
}

/** A complete fixture-tiny checkpoint (2 blocks, dim 8, patch 4, 1 channel). */
export function tinyCheckpoint(): Record<string, FixtureTensor> {
  const dim = 8;
  const hidden = 32;
  const tokens = 4;
  let seed = 0;
  const next = (shape: number[]): FixtureTensor => {
    const count = shape.reduce((a, d) => a * d, 1);
    const t = { shape, data: ramp(count, seed) };
    seed += count;
    return t;
  };
  const ckpt: Record<string, FixtureTensor> = {
    cls_token: next([1, 1, dim]),
    pos_embed: next([1, tokens + 1, dim]),
    'patch_embed.proj.weight': next([dim, 1, 4, 4]),
    'patch_embed.proj.bias': next([dim]),
  };
  for (let i = 0; i < 2; i++) {
    const b = `blocks.${i}.`;
    ckpt[b + 'norm1.weight'] = next([dim]);
    ckpt[b + 'norm1.bias'] = next([dim]);
    ckpt[b + 'attn.qkv.weight'] = next([3 * dim, dim]);
    ckpt[b + 'attn.qkv.bias'] = next([3 * dim]);
    ckpt[b + 'attn.proj.weight'] = next([dim, dim]);
    ckpt[b + 'attn.proj.bias'] = next([dim]);
    ckpt[b + 'norm2.weight'] = next([dim]);
    ckpt[b + 'norm2.bias'] = next([dim]);
    ckpt[b + 'mlp.fc1.weight'] = next([hidden, dim]);
    ckpt[b + 'mlp.fc1.bias'] = next([hidden]);
    ckpt[b + 'mlp.fc2.weight'] = next([dim, hidden]);
    ckpt[b + 'mlp.fc2.bias'] = next([dim]);
  }
  ckpt['norm.weight'] = next([dim]);
  ckpt['norm.bias'] = next([dim]);
  ckpt['head.weight'] = next([10, dim]);
  ckpt['head.bias'] = next([10]);
  return ckpt;
}
