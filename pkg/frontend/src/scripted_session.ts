/** Headless reader session for integration checks.
 *
 *   node dist/scripted_session.js --url http://127.0.0.1:8877 \
 *        --token <hex> [--limit 10]
 *
 * Annotates items in service order with fixed scores and a triangle
 * polygon rasterized at native resolution, then prints a JSON summary.
 */

import { StudyClient } from "./api.js";
import { Point } from "./raster.js";
import { buildPayload, freshState, setScore } from "./state.js";

function arg(name: string, fallback: string | null = null): string {
  const index = process.argv.indexOf(`--${name}`);
  if (index >= 0 && index + 1 < process.argv.length) {
    return process.argv[index + 1];
  }
  if (fallback !== null) return fallback;
  throw new Error(`missing --${name}`);
}

function pngSize(bytes: Uint8Array): { width: number; height: number } {
  // IHDR is always the first chunk: width/height at offsets 16..23
  if (bytes.length < 24) throw new Error("not a PNG");
  const view = new DataView(bytes.buffer, bytes.byteOffset);
  return { width: view.getUint32(16), height: view.getUint32(20) };
}

async function run(): Promise<void> {
  const url = arg("url");
  const token = arg("token");
  const limit = Number(arg("limit", "10"));
  const client = new StudyClient(url, token);

  let annotated = 0;
  const itemIds: string[] = [];
  while (annotated < limit) {
    const next = await client.next();
    if (next.done || !next.item_id || !next.image) break;
    const png = Uint8Array.from(Buffer.from(next.image, "base64"));
    const { width, height } = pngSize(png);

    const state = freshState(next.item_id);
    setScore(state, "quality", 4);
    setScore(state, "confidence", 5);
    setScore(state, "artifacts", 2);
    // triangle in the central lung region, native-resolution coordinates
    const cx = width / 2;
    const cy = height / 2;
    const r = Math.max(2, Math.floor(width / 8));
    state.polygon = [
      { x: cx - r, y: cy + r },
      { x: cx + r, y: cy + r },
      { x: cx, y: cy - r },
    ] as Point[];
    state.polygonClosed = true;

    await client.submit(buildPayload(state, width, height));
    annotated += 1;
    itemIds.push(next.item_id);
  }

  const progress = await client.progress();
  process.stdout.write(JSON.stringify({
    annotated,
    item_ids: itemIds,
    progress,
  }) + "\n");
}

run().catch((err) => {
  process.stderr.write(`scripted session failed: ${err}\n`);
  process.exit(1);
});
