// Thin local gateway between browsers and the bridge's TCP socket.
// GET /frames opens a TCP connection to the bridge and relays its
// newline-delimited frames as a chunked HTTP response; POST /send
// validates one command frame and writes it on a short-lived TCP
// connection (the bridge accepts commands on any connection and keeps
// ordering through the per-session seq). No recovery logic lives here.

import * as fs from 'node:fs';
import * as http from 'node:http';
import * as net from 'node:net';
import * as path from 'node:path';
import { fileURLToPath } from 'node:url';

import { ProtocolError, parseFrame } from './protocol.js';

export interface GatewayOptions {
  /** Bridge address, host:port. Requests may override with ?target=. */
  target: string;
  host?: string;
  port?: number;
  /** Directory with index.html etc.; defaults to the package's public/. */
  root?: string;
}

export interface Gateway {
  host: string;
  port: number;
  close(): Promise<void>;
}

const CONTENT_TYPES: Record<string, string> = {
  '.html': 'text/html; charset=utf-8',
  '.js': 'text/javascript; charset=utf-8',
  '.css': 'text/css; charset=utf-8',
  '.map': 'application/json',
  '.json': 'application/json',
};

function splitAddress(addr: string): { host: string; port: number } {
  const cut = addr.lastIndexOf(':');
  const port = Number(addr.slice(cut + 1));
  if (cut <= 0 || !Number.isInteger(port) || port <= 0 || port > 65535) {
    throw new Error(`bad bridge address ${JSON.stringify(addr)}`);
  }
  return { host: addr.slice(0, cut), port };
}

export function startGateway(options: GatewayOptions): Promise<Gateway> {
  splitAddress(options.target); // fail fast on a bad default
  const roots = staticRoots(options.root);

  const server = http.createServer((req, res) => {
    const url = new URL(req.url ?? '/', 'http://gateway');
    const target = url.searchParams.get('target') ?? options.target;
    try {
      if (url.pathname === '/frames' && req.method === 'GET') {
        streamFrames(target, req, res);
      } else if (url.pathname === '/send' && req.method === 'POST') {
        void sendCommand(target, req, res);
      } else if (url.pathname === '/target' && req.method === 'GET') {
        respond(res, 200, 'application/json', JSON.stringify({ target: options.target }));
      } else if (req.method === 'GET') {
        serveStatic(roots, url.pathname, res);
      } else {
        respond(res, 405, 'text/plain', 'method not allowed\n');
      }
    } catch (err) {
      respond(res, 400, 'text/plain', `${String(err)}\n`);
    }
  });

  return new Promise((resolve, reject) => {
    server.once('error', reject);
    server.listen(options.port ?? 0, options.host ?? '127.0.0.1', () => {
      const addr = server.address() as net.AddressInfo;
      resolve({
        host: addr.address,
        port: addr.port,
        close: () => new Promise((done) => {
          server.closeAllConnections();
          server.close(() => done());
        }),
      });
    });
  });
}

function streamFrames(
  target: string, req: http.IncomingMessage, res: http.ServerResponse,
): void {
  const { host, port } = splitAddress(target);
  const tcp = net.connect({ host, port, noDelay: true });
  tcp.on('connect', () => {
    res.writeHead(200, {
      'content-type': 'application/x-ndjson',
      'cache-control': 'no-store',
    });
    res.flushHeaders();
  });
  tcp.on('data', (chunk) => {
    res.write(chunk);
  });
  tcp.on('close', () => res.end());
  tcp.on('error', (err) => {
    if (!res.headersSent) {
      respond(res, 502, 'text/plain', `bridge unreachable: ${err.message}\n`);
    } else {
      res.end();
    }
  });
  req.on('close', () => tcp.destroy());
}

async function sendCommand(
  target: string, req: http.IncomingMessage, res: http.ServerResponse,
): Promise<void> {
  const { host, port } = splitAddress(target);
  let body = '';
  req.setEncoding('utf-8');
  for await (const chunk of req) {
    body += chunk;
    if (body.length > 1 << 20) {
      respond(res, 413, 'text/plain', 'frame too large\n');
      req.destroy();
      return;
    }
  }
  let line: string;
  try {
    const frame = parseFrame(body);
    if (frame.kind !== 'COMMAND') {
      respond(res, 400, 'text/plain', 'only COMMAND frames may be sent\n');
      return;
    }
    line = JSON.stringify(frame) + '\n';
  } catch (err) {
    if (err instanceof ProtocolError) {
      respond(res, 400, 'text/plain', `${err.message}\n`);
      return;
    }
    throw err;
  }
  const tcp = net.connect({ host, port, noDelay: true });
  tcp.on('connect', () => {
    // the bridge replays its backlog at us; we only came to deliver
    tcp.resume();
    tcp.end(line);
  });
  tcp.on('close', () => respond(res, 202, 'text/plain', 'sent\n'));
  tcp.on('error', (err) => {
    respond(res, 502, 'text/plain', `bridge unreachable: ${err.message}\n`);
  });
}

function staticRoots(override?: string): string[] {
  if (override !== undefined) return [override];
  const here = path.dirname(fileURLToPath(import.meta.url));
  // compiled layout: dist/gateway.js next to dist/app.js, public/ beside dist/
  return [path.join(here, '..', 'public'), here];
}

function serveStatic(roots: string[], pathname: string, res: http.ServerResponse): void {
  const name = pathname === '/' ? 'index.html' : pathname.replace(/^\/+/, '');
  const ext = path.extname(name);
  const type = CONTENT_TYPES[ext];
  if (type === undefined || name.split('/').includes('..')) {
    respond(res, 404, 'text/plain', 'not found\n');
    return;
  }
  for (const root of roots) {
    const rootAbs = path.resolve(root);
    const full = path.resolve(rootAbs, name);
    if (!full.startsWith(rootAbs + path.sep)) continue;
    if (fs.existsSync(full) && fs.statSync(full).isFile()) {
      respond(res, 200, type, fs.readFileSync(full));
      return;
    }
  }
  respond(res, 404, 'text/plain', 'not found\n');
}

function respond(
  res: http.ServerResponse, status: number, type: string, body: string | Buffer,
): void {
  if (res.headersSent) {
    res.end();
    return;
  }
  res.writeHead(status, { 'content-type': type });
  res.end(body);
}
