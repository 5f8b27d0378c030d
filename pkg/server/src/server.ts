/**
 * Transports: stdio (one connection) and TCP (one bundle, many connections).
 * Requests are processed in order per connection; malformed lines are
 * answered with an error response, never silence.
 */

import { createInterface } from 'node:readline';
import { createServer, type Server } from 'node:net';
import type { Readable, Writable } from 'node:stream';
import { ModelBundle } from './bundle.js';
import { parseRequest, type Response } from './protocol.js';

function serialize(response: Response): string {
  return JSON.stringify(response) + '\n';
}

export async function serveStream(
  bundle: ModelBundle,
  input: Readable,
  output: Writable,
): Promise<void> {
  const lines = createInterface({ input, crlfDelay: Infinity });
  for await (const line of lines) {
    if (!line.trim()) continue;
    const request = parseRequest(line);
    const response: Response = request
      ? bundle.handleRequest(request)
      : { id: null, error: 'malformed request' };
    output.write(serialize(response));
  }
}

export function serveTcp(bundle: ModelBundle, port: number, host = '127.0.0.1'): Server {
  const server = createServer((socket) => {
    void serveStream(bundle, socket, socket).catch(() => socket.destroy());
  });
  server.listen(port, host);
  return server;
}
