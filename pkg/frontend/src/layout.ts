/** Deterministic force-directed layout, seeded by graph id so both panels
 *  of a comparison (and any re-render) place nodes identically. */

export interface Point {
  x: number;
  y: number;
}

/** FNV-1a, stable 32-bit hash of the graph id. */
export function hashString(s: string): number {
  let h = 0x811c9dc5;
  for (let i = 0; i < s.length; i++) {
    h ^= s.charCodeAt(i);
    h = Math.imul(h, 0x01000193);
  }
  return h >>> 0;
}

/** mulberry32: small deterministic PRNG, good enough for layout jitter. */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) ^ t;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

const ITERATIONS = 120;
const REPULSION = 0.005;
const SPRING = 0.05;
const SPRING_LENGTH = 0.35;
const STEP = 0.85;

/** Positions in the unit square for n nodes and the given edges. */
export function layoutGraph(
  graphId: string,
  n: number,
  edges: number[][],
): Point[] {
  const rand = mulberry32(hashString(graphId));
  // circle start plus jitter avoids the degenerate all-collinear case
  const pos: Point[] = [];
  for (let i = 0; i < n; i++) {
    const angle = (2 * Math.PI * i) / Math.max(n, 1);
    pos.push({
      x: 0.5 + 0.38 * Math.cos(angle) + 0.02 * (rand() - 0.5),
      y: 0.5 + 0.38 * Math.sin(angle) + 0.02 * (rand() - 0.5),
    });
  }
  for (let it = 0; it < ITERATIONS; it++) {
    const force: Point[] = pos.map(() => ({ x: 0, y: 0 }));
    for (let i = 0; i < n; i++) {
      for (let j = i + 1; j < n; j++) {
        const dx = pos[i].x - pos[j].x;
        const dy = pos[i].y - pos[j].y;
        const d2 = dx * dx + dy * dy + 1e-6;
        const f = REPULSION / d2;
        const d = Math.sqrt(d2);
        force[i].x += (f * dx) / d;
        force[i].y += (f * dy) / d;
        force[j].x -= (f * dx) / d;
        force[j].y -= (f * dy) / d;
      }
    }
    for (const [src, dst] of edges) {
      const dx = pos[dst].x - pos[src].x;
      const dy = pos[dst].y - pos[src].y;
      const d = Math.sqrt(dx * dx + dy * dy) + 1e-6;
      const f = SPRING * (d - SPRING_LENGTH);
      force[src].x += (f * dx) / d;
      force[src].y += (f * dy) / d;
      force[dst].x -= (f * dx) / d;
      force[dst].y -= (f * dy) / d;
    }
    const cool = STEP * (1 - it / ITERATIONS);
    for (let i = 0; i < n; i++) {
      pos[i].x = clamp01(pos[i].x + cool * force[i].x);
      pos[i].y = clamp01(pos[i].y + cool * force[i].y);
    }
  }
  return pos;
}

function clamp01(v: number): number {
  return Math.min(0.95, Math.max(0.05, v));
}
