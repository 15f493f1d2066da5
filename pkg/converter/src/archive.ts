/**
 * Tensor-archive writer: <prefix>.manifest.json plus <prefix>.bin.
 *
 * The manifest holds an ordered entries list ({name, dtype, shape, offset,
 * byte_len}) and an optional meta object; the blob is the tensors' raw
 * little-endian data concatenated in entry order. Offsets are ascending and
 * contiguous. The format is shared with the training core, which validates
 * every invariant on load.
 */

import * as crypto from 'crypto';
import * as fs from 'fs';
import * as path from 'path';

export interface ArchiveTensor {
  name: string;
  shape: number[];
  data: Float32Array;
}

interface ManifestEntry {
  name: string;
  dtype: 'f32';
  shape: number[];
  offset: number;
  byte_len: number;
}

export class ArchiveWriteError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'ArchiveWriteError';
  }
}

/** Writes the archive pair and returns the sha256 of the blob. */
export function writeArchive(
  prefix: string,
  tensors: ArchiveTensor[],
  meta?: Record<string, unknown>,
): string {
  const entries: ManifestEntry[] = [];
  const seen = new Set<string>();
  let offset = 0;
  for (const t of tensors) {
    if (seen.has(t.name)) {
      throw new ArchiveWriteError(`duplicate tensor name "${t.name}"`);
    }
    seen.add(t.name);
    const count = t.shape.reduce((a, d) => a * d, 1);
    if (t.data.length !== count) {
      throw new ArchiveWriteError(
        `tensor "${t.name}": ${t.data.length} values for shape ` +
        `[${t.shape.join(', ')}]`,
      );
    }
    entries.push({
      name: t.name,
      dtype: 'f32',
      shape: t.shape.slice(),
      offset,
      byte_len: count * 4,
    });
    offset += count * 4;
  }

  const blob = Buffer.alloc(offset);
  const view = new DataView(blob.buffer, blob.byteOffset, blob.byteLength);
  let cursor = 0;
  for (const t of tensors) {
    for (let i = 0; i < t.data.length; i++) {
      view.setFloat32(cursor, t.data[i], true);
      cursor += 4;
    }
  }

  const manifest: Record<string, unknown> = { entries };
  if (meta !== undefined) {
    manifest.meta = meta;
  }
  fs.mkdirSync(path.dirname(path.resolve(`${prefix}.bin`)), { recursive: true });
  fs.writeFileSync(`${prefix}.manifest.json`, JSON.stringify(manifest, null, 1));
  fs.writeFileSync(`${prefix}.bin`, blob);
  return crypto.createHash('sha256').update(blob).digest('hex');
}
