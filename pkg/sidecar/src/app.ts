import express from "express";
import type { NextFunction, Request, Response } from "express";
import { DIM, MODEL_NAME, ZeroVectorError, encodeBatch } from "./encoder.js";

export const MAX_BATCH = 256;
export const MAX_TEXT_CHARS = 512;

export interface AppState {
  ready: boolean;
}

function badRequest(res: Response, message: string): void {
  res.status(400).json({ error: message });
}

/**
 * Embedding service over a shared mutable state flag.
 *
 * Both endpoints answer 503 until state.ready flips, so a caller polling
 * /health sees the same lifecycle the embed route enforces.
 */
export function createApp(state: AppState = { ready: true }): express.Express {
  const app = express();
  app.use(express.json({ limit: "2mb" }));

  app.get("/health", (_req: Request, res: Response) => {
    if (!state.ready) {
      res.status(503).json({ error: "model is still loading" });
      return;
    }
    res.json({ model: MODEL_NAME, dim: DIM });
  });

  app.post("/embed", (req: Request, res: Response) => {
    if (!state.ready) {
      res.status(503).json({ error: "model is still loading" });
      return;
    }
    const texts: unknown = req.body?.texts;
    if (!Array.isArray(texts) || texts.length === 0) {
      badRequest(res, "body must be {\"texts\": [...]} with at least one entry");
      return;
    }
    if (texts.length > MAX_BATCH) {
      res.status(413).json({
        error: `batch of ${texts.length} exceeds the limit of ${MAX_BATCH}`,
      });
      return;
    }
    for (let i = 0; i < texts.length; i++) {
      const t: unknown = texts[i];
      if (typeof t !== "string" || t.length === 0) {
        badRequest(res, `texts[${i}] must be a non-empty string`);
        return;
      }
      if (t.length > MAX_TEXT_CHARS) {
        badRequest(res, `texts[${i}] exceeds ${MAX_TEXT_CHARS} characters`);
        return;
      }
    }
    let vectors: number[][];
    try {
      vectors = encodeBatch(texts as string[]);
    } catch (err) {
      if (err instanceof ZeroVectorError) {
        badRequest(res, err.message);
        return;
      }
      throw err;
    }
    res.json({ vectors });
  });

  // The body parser forwards its failures here; map them onto the wire codes.
  app.use(
    (err: unknown, _req: Request, res: Response, next: NextFunction) => {
      if (res.headersSent) {
        next(err);
        return;
      }
      const kind = (err as { type?: string })?.type;
      if (kind === "entity.parse.failed") {
        badRequest(res, "malformed JSON body");
        return;
      }
      if (kind === "entity.too.large") {
        res.status(413).json({ error: "request body too large" });
        return;
      }
      res.status(500).json({ error: "internal error" });
    },
  );

  return app;
}
