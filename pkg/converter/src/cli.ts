/**
 * Command line entry point.
 *
 *   export --src <checkpoint.safetensors> --variant <name> --out <prefix>
 *
 * Exit codes: 0 success, 2 bad usage or unreadable input, 3 conversion
 * failure (missing tensor, shape mismatch).
 */

import { exportCheckpoint, MissingTensorError, TensorShapeError } from './convert';
import { UnknownVariantError, VARIANTS } from './names';
import { SafetensorsError } from './safetensors';

const USAGE =
  'usage: export --src <path> --variant <' +
  Object.keys(VARIANTS).join('|') +
  '> --out <prefix>';

interface ExportArgs {
  src: string;
  variant: string;
  out: string;
}

function parseArgs(argv: string[]): ExportArgs {
  if (argv[0] !== 'export') {
    throw new Error(`unknown command "${argv[0] ?? ''}"\n${USAGE}`);
  }
  const values: Record<string, string> = {};
  for (let i = 1; i < argv.length; i += 2) {
    const flag = argv[i];
    if (!flag.startsWith('--') || !['--src', '--variant', '--out'].includes(flag)) {
      throw new Error(`unknown flag "${flag}"\n${USAGE}`);
    }
    const value = argv[i + 1];
    if (value === undefined) {
      throw new Error(`flag ${flag} needs a value\n${USAGE}`);
    }
    values[flag.slice(2)] = value;
  }
  for (const key of ['src', 'variant', 'out']) {
    if (!values[key]) {
      throw new Error(`missing --${key}\n${USAGE}`);
    }
  }
  return { src: values.src, variant: values.variant, out: values.out };
}

export function main(argv: string[]): number {
  let args: ExportArgs;
  try {
    args = parseArgs(argv);
  } catch (err) {
    console.error((err as Error).message);
    return 2;
  }

  try {
    const report = exportCheckpoint(args.src, args.variant, args.out);
    for (const name of report.mapped) {
      console.log(`mapped    ${name}`);
    }
    for (const name of report.unmapped) {
      console.log(`unmapped  ${name}`);
    }
    console.log(
      `exported ${report.mapped.length} tensors (${report.byteLength} bytes), ` +
      `${report.unmapped.length} unmapped, sha256 ${report.checksum}`,
    );
    return 0;
  } catch (err) {
    if (err instanceof UnknownVariantError || err instanceof SafetensorsError) {
      console.error(`config error: ${(err as Error).message}`);
      return 2;
    }
    if (
      err instanceof MissingTensorError ||
      err instanceof TensorShapeError
    ) {
      console.error(`conversion failure: ${(err as Error).message}`);
      return 3;
    }
    if ((err as NodeJS.ErrnoException).code === 'ENOENT') {
      console.error(`config error: ${(err as Error).message}`);
      return 2;
    }
    throw err;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
