/**
 * Deterministic fake scorers for conformance testing.
 *
 * Every score derives from sha256 over (seed, role, ...fields) joined with a
 * unit separator, mapped to the top 53 hash bits divided by 2^53. That value
 * is exactly representable, so any client that implements the same recipe
 * reproduces the scores bit-for-bit up to libm differences in exp/log.
 */

import { createHash } from 'node:crypto';
import type { SpeakerResult, VocabInfo } from './protocol.js';

export const DUMMY_VOCAB: VocabInfo = {
  words: [...Array.from({ length: 15 }, (_, i) => `w${String(i).padStart(2, '0')}`), '</s>'],
  eos_id: 15,
};

export function unitFloat(parts: string[]): number {
  const digest = createHash('sha256').update(parts.join('\x1f'), 'utf8').digest();
  const top = digest.readBigUInt64BE(0) >> 11n;
  return Number(top) / 2 ** 53;
}

function logsumexp(values: number[]): number {
  const max = Math.max(...values);
  if (max === -Infinity) return -Infinity;
  let total = 0;
  for (const v of values) total += Math.exp(v - max);
  return max + Math.log(total);
}

export class DummyModel {
  constructor(private readonly seed: string) {}

  readonly vocab = DUMMY_VOCAB;

  /** Log-softmax over hash-derived logits in [-4, 4), sparsified to top-k. */
  speakerNext(item: string, prefix: string, topK: number | null): SpeakerResult {
    const size = this.vocab.words.length;
    const logits = Array.from({ length: size }, (_, j) =>
      8 * unitFloat([this.seed, 'speaker', item, prefix, String(j)]) - 4,
    );
    const norm = logsumexp(logits);
    const logps = logits.map((x) => x - norm);
    const k = Math.min(topK ?? size, size);
    const order = logps
      .map((lp, token) => ({ lp, token }))
      .sort((a, b) => b.lp - a.lp || a.token - b.token)
      .slice(0, k);
    const kept = new Set(order.map((o) => o.token));
    const rest = logps.filter((_, token) => !kept.has(token));
    return {
      tokens: order.map((o) => o.token),
      logps: order.map((o) => o.lp),
      other_logp: rest.length ? logsumexp(rest) : null,
    };
  }

  /** Cosine-like similarities in [-1, 1). */
  similarity(items: string[], text: string): number[] {
    return items.map((item) => 2 * unitFloat([this.seed, 'similarity', item, text]) - 1);
  }

  /** One natural-log likelihood in [-5, 0) per whitespace token. */
  lmScore(text: string): number[] {
    const words = text.split(/\s+/).filter(Boolean);
    return words.map((_, t) => -5 * unitFloat([this.seed, 'lm', text, String(t)]));
  }
}
