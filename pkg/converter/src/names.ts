/**
 * Name mapping between upstream ViT checkpoints and canonical archive names.
 *
 * The table is generated from a variant descriptor so every expected source
 * tensor is known up front, with its exact shape. Canonical weights are
 * row-vector oriented (input dim first), so 2-D linear weights transpose;
 * the patch projection unrolls from conv layout to a flat (patch*patch*C_in,
 * C_out) matrix; the positional table drops its batch axis and moves the
 * class-token row from first to last.
 */

/** How a source tensor's values are rearranged into the canonical tensor. */
export type Transform =
  | 'copy'
  | 'transpose2d'
  | 'clsToken'
  | 'posEmbed'
  | 'patchProj';

export interface MapRule {
  /** Parameter name in the upstream checkpoint. */
  src: string;
  /** Canonical name in the exported archive. */
  dst: string;
  transform: Transform;
  /** Exact source shape required by the variant. */
  srcShape: number[];
  /** Shape of the canonical tensor after the transform. */
  dstShape: number[];
}

export interface Variant {
  name: string;
  blocks: number;
  dim: number;
  heads: number;
  patch: number;
  /** Input image channels. */
  channels: number;
  /** Patch tokens, before the class token. */
  tokens: number;
  mlpRatio: number;
}

export const VARIANTS: Record<string, Variant> = {
  'vit-s': {
    name: 'vit-s',
    blocks: 12,
    dim: 384,
    heads: 6,
    patch: 16,
    channels: 3,
    tokens: 196,
    mlpRatio: 4,
  },
  'fixture-tiny': {
    name: 'fixture-tiny',
    blocks: 2,
    dim: 8,
    heads: 2,
    patch: 4,
    channels: 1,
    tokens: 4,
    mlpRatio: 4,
  },
};

export class UnknownVariantError extends Error {
  constructor(name: string) {
    super(
      `unknown variant "${name}"; known: ${Object.keys(VARIANTS).join(', ')}`,
    );
    this.name = 'UnknownVariantError';
  }
}

export function getVariant(name: string): Variant {
  const variant = VARIANTS[name];
  if (!variant) {
    throw new UnknownVariantError(name);
  }
  return variant;
}

/** The full expected-tensor inventory for a variant, in archive order. */
export function buildNameMap(variant: Variant): MapRule[] {
  const { blocks, dim, patch, channels, tokens, mlpRatio } = variant;
  const hidden = dim * mlpRatio;
  const rules: MapRule[] = [
    {
      src: 'cls_token',
      dst: 'cls',
      transform: 'clsToken',
      srcShape: [1, 1, dim],
      dstShape: [1, dim],
    },
    {
      src: 'pos_embed',
      dst: 'pos_embed',
      transform: 'posEmbed',
      srcShape: [1, tokens + 1, dim],
      dstShape: [tokens + 1, dim],
    },
    {
      src: 'patch_embed.proj.weight',
      dst: 'patch_embed.weight',
      transform: 'patchProj',
      srcShape: [dim, channels, patch, patch],
      dstShape: [patch * patch * channels, dim],
    },
    {
      src: 'patch_embed.proj.bias',
      dst: 'patch_embed.bias',
      transform: 'copy',
      srcShape: [dim],
      dstShape: [dim],
    },
  ];

  for (let i = 0; i < blocks; i++) {
    const b = `blocks.${i}.`;
    const vector = (leaf: string, size: number): MapRule => ({
      src: b + leaf,
      dst: b + leaf,
      transform: 'copy',
      srcShape: [size],
      dstShape: [size],
    });
    const matrix = (leaf: string, rows: number, cols: number): MapRule => ({
      src: b + leaf,
      dst: b + leaf,
      transform: 'transpose2d',
      srcShape: [rows, cols],
      dstShape: [cols, rows],
    });
    rules.push(
      vector('norm1.weight', dim),
      vector('norm1.bias', dim),
      matrix('attn.qkv.weight', 3 * dim, dim),
      vector('attn.qkv.bias', 3 * dim),
      matrix('attn.proj.weight', dim, dim),
      vector('attn.proj.bias', dim),
      vector('norm2.weight', dim),
      vector('norm2.bias', dim),
      matrix('mlp.fc1.weight', hidden, dim),
      vector('mlp.fc1.bias', hidden),
      matrix('mlp.fc2.weight', dim, hidden),
      vector('mlp.fc2.bias', dim),
    );
  }

  rules.push(
    {
      src: 'norm.weight',
      dst: 'norm.weight',
      transform: 'copy',
      srcShape: [dim],
      dstShape: [dim],
    },
    {
      src: 'norm.bias',
      dst: 'norm.bias',
      transform: 'copy',
      srcShape: [dim],
      dstShape: [dim],
    },
  );
  return rules;
}

/** Throws if any source or destination name appears twice. */
export function assertInjective(rules: MapRule[]): void {
  const srcs = new Set<string>();
  const dsts = new Set<string>();
  for (const rule of rules) {
    if (srcs.has(rule.src)) {
      throw new Error(`duplicate source name in map: "${rule.src}"`);
    }
    if (dsts.has(rule.dst)) {
      throw new Error(`duplicate canonical name in map: "${rule.dst}"`);
    }
    srcs.add(rule.src);
    dsts.add(rule.dst);
  }
}
