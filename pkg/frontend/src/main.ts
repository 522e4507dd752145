// Gateway entry point: `node dist/main.js --target 127.0.0.1:48620`.
// The target defaults to INSITU_BRIDGE so the gateway and the crashed
// process can share one piece of configuration.

import { parseArgs } from 'node:util';

import { startGateway } from './gateway.js';

const { values } = parseArgs({
  options: {
    target: { type: 'string', short: 't' },
    host: { type: 'string', default: '127.0.0.1' },
    port: { type: 'string', short: 'p', default: '8787' },
  },
});

const target = values.target ?? process.env['INSITU_BRIDGE'];
if (target === undefined) {
  console.error('usage: main.js --target HOST:PORT  (or set INSITU_BRIDGE)');
  process.exit(2);
}

const gateway = await startGateway({
  target,
  host: values.host,
  port: Number(values.port),
});
console.log(`console on http://${gateway.host}:${gateway.port}/  bridge ${target}`);
