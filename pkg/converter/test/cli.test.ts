import * as fs from 'fs';
import * as os from 'os';
import * as path from 'path';

import { afterEach, beforeEach, describe, expect, it, vi } from 'vitest';

import { main } from '../src/cli';
import { tinyCheckpoint, writeSafetensors } from './helpers';

let dir: string;
let out: string[];
let err: string[];

beforeEach(() => {
  dir = fs.mkdtempSync(path.join(os.tmpdir(), 'cli-'));
  out = [];
  err = [];
  vi.spyOn(console, 'log').mockImplementation((msg) => out.push(String(msg)));
  vi.spyOn(console, 'error').mockImplementation((msg) => err.push(String(msg)));
});

afterEach(() => {
  vi.restoreAllMocks();
  fs.rmSync(dir, { recursive: true, force: true });
});

function fixturePath(): string {
  const src = path.join(dir, 'vit.safetensors');
  writeSafetensors(src, tinyCheckpoint());
  return src;
}

describe('cli', () => {
  it('exports and reports each tensor', () => {
    const src = fixturePath();
    const prefix = path.join(dir, 'canon');
    const code = main(['export', '--src', src, '--variant', 'fixture-tiny', '--out', prefix]);
    expect(code).toBe(0);
    expect(fs.existsSync(`${prefix}.manifest.json`)).toBe(true);
    expect(out.filter((l) => l.startsWith('mapped')).length).toBe(30);
    expect(out.filter((l) => l.startsWith('unmapped')).length).toBe(2);
    expect(out[out.length - 1]).toMatch(/exported 30 tensors .* sha256 [0-9a-f]{64}/);
  });

  it('fails with 2 on usage errors', () => {
    expect(main([])).toBe(2);
    expect(main(['export', '--src', 'x'])).toBe(2);
    expect(main(['frobnicate'])).toBe(2);
    expect(main(['export', '--src', 'a', '--variant', 'b', '--out', 'c', '--bogus', 'd'])).toBe(2);
    expect(err.length).toBeGreaterThan(0);
  });

  it('fails with 2 on unknown variants and missing files', () => {
    const src = fixturePath();
    expect(
      main(['export', '--src', src, '--variant', 'vit-997', '--out', path.join(dir, 'o')]),
    ).toBe(2);
    expect(
      main(['export', '--src', path.join(dir, 'nope.safetensors'), '--variant', 'fixture-tiny', '--out', path.join(dir, 'o')]),
    ).toBe(2);
    expect(err.every((l) => l.startsWith('config error:'))).toBe(true);
  });

  it('fails with 3 when the checkpoint cannot be converted', () => {
    const ckpt = tinyCheckpoint();
    delete (ckpt as Record<string, unknown>)['norm.bias'];
    const src = path.join(dir, 'vit.safetensors');
    writeSafetensors(src, ckpt);
    const code = main(['export', '--src', src, '--variant', 'fixture-tiny', '--out', path.join(dir, 'o')]);
    expect(code).toBe(3);
    expect(err[err.length - 1]).toMatch(/^conversion failure: .*norm\.bias/);
  });
});
