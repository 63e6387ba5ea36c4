import { createApp } from "./app.js";
import { encodeBatch } from "./encoder.js";

function pickPort(argv: string[]): number {
  const flag = argv.indexOf("--port");
  if (flag !== -1 && argv[flag + 1] !== undefined) {
    return Number(argv[flag + 1]);
  }
  if (process.env.PORT) {
    return Number(process.env.PORT);
  }
  return 8700;
}

const port = pickPort(process.argv.slice(2));
if (!Number.isInteger(port) || port < 0 || port > 65535) {
  console.error(`invalid port: ${port}`);
  process.exit(1);
}

const state = { ready: false };
const app = createApp(state);

const server = app.listen(port, "127.0.0.1", () => {
  // Warm the encoder once so the first request pays no startup cost.
  encodeBatch(["warmup"]);
  state.ready = true;
  const addr = server.address();
  const bound = typeof addr === "object" && addr !== null ? addr.port : port;
  console.log(`embed sidecar listening on http://127.0.0.1:${bound}`);
});

for (const signal of ["SIGINT", "SIGTERM"] as const) {
  process.on(signal, () => {
    server.close(() => process.exit(0));
  });
}
