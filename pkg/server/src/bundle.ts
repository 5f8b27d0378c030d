/**
 * A ModelBundle holds whichever scorer backends this server instance offers;
 * the handshake advertises exactly those. Dummy mode wires all three roles to
 * hash-based fakes. Real models plug in through a backend module (see
 * README): any subset of the three roles may be present.
 */

import { DummyModel } from './dummy.js';
import {
  PROTOCOL_VERSION,
  type Request,
  type Response,
  type SpeakerQuery,
  type SpeakerResult,
  type VocabInfo,
  expectString,
  expectStringArray,
} from './protocol.js';

export interface Backends {
  vocab?: VocabInfo;
  speakerNext?: (item: string, prefix: string, topK: number | null) => SpeakerResult;
  similarity?: (items: string[], text: string) => number[];
  lmScore?: (text: string) => number[];
}

export class ModelBundle {
  constructor(
    private readonly backends: Backends,
    private readonly defaultTopK: number | null = null,
  ) {}

  static dummy(seed: string | number, topK: number | null = null): ModelBundle {
    const model = new DummyModel(String(seed));
    return new ModelBundle(
      {
        vocab: model.vocab,
        speakerNext: (item, prefix, k) => model.speakerNext(item, prefix, k),
        similarity: (items, text) => model.similarity(items, text),
        lmScore: (text) => model.lmScore(text),
      },
      topK,
    );
  }

  static async fromModule(path: string, topK: number | null = null): Promise<ModelBundle> {
    const mod = (await import(path)) as { backends?: Backends };
    if (!mod.backends) {
      throw new Error(`model module ${path} does not export 'backends'`);
    }
    return new ModelBundle(mod.backends, topK);
  }

  capabilities(): string[] {
    const caps: string[] = [];
    if (this.backends.speakerNext) caps.push('speaker_next');
    if (this.backends.similarity) caps.push('similarity');
    if (this.backends.lmScore) caps.push('lm_score');
    return caps;
  }

  handleSingle(kind: string, payload: unknown): unknown {
    const p = (payload ?? {}) as Record<string, unknown>;
    switch (kind) {
      case 'handshake': {
        if (p.version !== PROTOCOL_VERSION) {
          throw new Error('unsupported protocol version');
        }
        const result: Record<string, unknown> = {
          version: PROTOCOL_VERSION,
          capabilities: this.capabilities(),
        };
        if (this.backends.vocab) result.vocab = this.backends.vocab;
        return result;
      }
      case 'speaker_next': {
        if (!this.backends.speakerNext) throw new Error('unsupported kind: speaker_next');
        const query = p as unknown as SpeakerQuery;
        const topK = typeof query.top_k === 'number' ? query.top_k : this.defaultTopK;
        return this.backends.speakerNext(
          expectString(query.item, 'item'),
          expectString(query.prefix, 'prefix'),
          topK,
        );
      }
      case 'similarity': {
        if (!this.backends.similarity) throw new Error('unsupported kind: similarity');
        return {
          similarities: this.backends.similarity(
            expectStringArray(p.items, 'items'),
            expectString(p.text, 'text'),
          ),
        };
      }
      case 'lm_score': {
        if (!this.backends.lmScore) throw new Error('unsupported kind: lm_score');
        return { token_logps: this.backends.lmScore(expectString(p.text, 'text')) };
      }
      default:
        throw new Error(`unsupported kind: ${kind}`);
    }
  }

  handleRequest(request: Request): Response {
    try {
      const payload = request.payload as Record<string, unknown> | null;
      if (payload && Array.isArray(payload.batch)) {
        return {
          id: request.id,
          result: {
            batch: payload.batch.map((single) => this.handleSingle(request.kind, single)),
          },
        };
      }
      return { id: request.id, result: this.handleSingle(request.kind, request.payload) };
    } catch (err) {
      return { id: request.id, error: err instanceof Error ? err.message : String(err) };
    }
  }
}
