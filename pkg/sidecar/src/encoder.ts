import { blake2b } from "blakejs";

export const DIM = 768;
export const MODEL_NAME = "hashed-trigram-768";

// Tokens are maximal runs of ascii lowercase letters and digits.
const TOKEN_SPLIT = /[^0-9a-z]+/;

const utf8 = new TextEncoder();

export class ZeroVectorError extends Error {}

function indexSign(trigram: string): [number, number] {
  const digest = blake2b(utf8.encode(trigram), undefined, 8);
  let h = 0n;
  for (const byte of digest) h = (h << 8n) | BigInt(byte);
  // Low bits pick the bucket, a disjoint bit picks the sign.
  const idx = Number(h % BigInt(DIM));
  const sign = ((h >> 32n) & 1n) === 1n ? 1.0 : -1.0;
  return [idx, sign];
}

/**
 * Hashed character-trigram bag, L2-normalized.
 *
 * toLowerCase stands in for full case folding; the two agree on any input
 * whose folding is plain lowercasing, which covers ascii headers entirely.
 */
export function encode(text: string): number[] {
  const vec = new Float64Array(DIM);
  for (const token of text.toLowerCase().split(TOKEN_SPLIT)) {
    if (!token) continue;
    const padded = `^${token}$`;
    for (let i = 0; i + 3 <= padded.length; i++) {
      const [idx, sign] = indexSign(padded.slice(i, i + 3));
      vec[idx] += sign;
    }
  }
  let sumSquares = 0;
  for (const x of vec) sumSquares += x * x;
  const norm = Math.sqrt(sumSquares);
  if (norm === 0) {
    throw new ZeroVectorError(
      `text ${JSON.stringify(text)} produced an all-zero embedding`,
    );
  }
  const out = new Array<number>(DIM);
  for (let i = 0; i < DIM; i++) out[i] = vec[i] / norm;
  return out;
}

export function encodeBatch(texts: string[]): number[][] {
  return texts.map(encode);
}
