/**
 * Scorer protocol v1: newline-framed UTF-8 JSON over stdio or TCP.
 *
 * Requests:  {"id": N, "kind": K, "payload": {...}}
 * Responses: {"id": N, "result": {...}} or {"id": N, "error": "message"}
 *
 * Kinds: handshake, speaker_next, similarity, lm_score. A payload of
 * {"batch": [single, ...]} is answered with {"batch": [result, ...]} in the
 * same order. See ../../PROTOCOL.md for byte-exact examples.
 */

export const PROTOCOL_VERSION = 1;

export type Kind = 'handshake' | 'speaker_next' | 'similarity' | 'lm_score';

export interface Request {
  id: number;
  kind: string;
  payload: unknown;
}

export interface SpeakerQuery {
  item: string;
  prefix: string;
  top_k?: number | null;
}

export interface SpeakerResult {
  tokens: number[];
  logps: number[];
  other_logp: number | null;
}

export interface SimilarityQuery {
  items: string[];
  text: string;
}

export interface LmQuery {
  text: string;
}

export interface VocabInfo {
  words: string[];
  eos_id: number;
}

export type Response =
  | { id: number | null; result: unknown }
  | { id: number | null; error: string };

export function parseRequest(line: string): Request | null {
  let message: unknown;
  try {
    message = JSON.parse(line);
  } catch {
    return null;
  }
  if (typeof message !== 'object' || message === null) return null;
  const { id, kind } = message as { id?: unknown; kind?: unknown };
  if (typeof id !== 'number' || typeof kind !== 'string') return null;
  return { id, kind, payload: (message as { payload?: unknown }).payload ?? {} };
}

export function expectString(value: unknown, field: string): string {
  if (typeof value !== 'string') throw new Error(`${field} must be a string`);
  return value;
}

export function expectStringArray(value: unknown, field: string): string[] {
  if (!Array.isArray(value) || value.some((v) => typeof v !== 'string')) {
    throw new Error(`${field} must be an array of strings`);
  }
  return value as string[];
}
