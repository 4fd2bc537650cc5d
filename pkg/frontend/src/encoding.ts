export const ENCODING_DIM = 6;

/**
 * One-hot encoding for the k-th pressure preset (ascending mu order).
 * The largest preset owns the highest-order bit, so preset 0 (smallest mu)
 * maps to [0,0,0,0,0,1] and preset 5 (largest) to [1,0,0,0,0,0].
 */
export function presetEncoding(k: number, dim: number = ENCODING_DIM): number[] {
  if (!Number.isInteger(k) || k < 0 || k >= dim) {
    throw new RangeError(`preset index must be in [0, ${dim}), got ${k}`);
  }
  const bits = new Array<number>(dim).fill(0);
  bits[dim - 1 - k] = 1;
  return bits;
}

/** Parse a free-form bit string like "010100"; returns null when invalid. */
export function parseEncodingBits(text: string, dim: number = ENCODING_DIM): number[] | null {
  const trimmed = text.trim();
  if (trimmed.length !== dim || /[^01]/.test(trimmed)) return null;
  return Array.from(trimmed, (ch) => (ch === "1" ? 1 : 0));
}

export function formatEncoding(bits: number[]): string {
  return bits.join("");
}

export function sameEncoding(a: number[], b: number[]): boolean {
  return a.length === b.length && a.every((bit, i) => bit === b[i]);
}
