/**
 * Scorer server entry point.
 *
 *   node dist/main.js --dummy [--seed 0] [--top-k 16] [--endpoint stdio]
 *   node dist/main.js --models ./my-backends.mjs --endpoint tcp:7155
 *
 * --dummy serves hash-based deterministic scores (conformance mode);
 * --models loads a module exporting `backends` (real-model mode). Exactly one
 * of the two must be given. Model load failures abort at startup.
 */

import { parseArgs } from 'node:util';
import { ModelBundle } from './bundle.js';
import { serveStream, serveTcp } from './server.js';

async function main(): Promise<number> {
  const { values } = parseArgs({
    options: {
      endpoint: { type: 'string', default: 'stdio' },
      dummy: { type: 'boolean', default: false },
      models: { type: 'string' },
      seed: { type: 'string', default: '0' },
      'top-k': { type: 'string' },
    },
  });
  const topK = values['top-k'] ? Number(values['top-k']) : null;
  if (topK !== null && (!Number.isInteger(topK) || topK < 1)) {
    throw new Error('--top-k must be a positive integer');
  }
  if (values.dummy === Boolean(values.models)) {
    throw new Error('pass exactly one of --dummy or --models <module>');
  }
  const bundle = values.dummy
    ? ModelBundle.dummy(values.seed ?? '0', topK)
    : await ModelBundle.fromModule(values.models as string, topK);

  const endpoint = values.endpoint ?? 'stdio';
  if (endpoint === 'stdio') {
    await serveStream(bundle, process.stdin, process.stdout);
    return 0;
  }
  const tcp = endpoint.match(/^tcp:(\d+)$/);
  if (tcp) {
    const server = serveTcp(bundle, Number(tcp[1]));
    await new Promise((resolve) => server.on('close', resolve));
    return 0;
  }
  throw new Error(`unknown endpoint: ${endpoint} (use stdio or tcp:<port>)`);
}

main()
  .then((code) => process.exit(code))
  .catch((err) => {
    console.error(String(err instanceof Error ? err.message : err));
    process.exit(1);
  });
