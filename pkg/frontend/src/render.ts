/** SVG markup for one graph panel. Both panels of an item use the same
 *  seeded layout; only the highlighted node set differs. Relation labels
 *  are never drawn and method identities never reach this layer. */

import { ItemView } from "./api";
import { layoutGraph, Point } from "./layout";

export const SELECTED_COLOR = "#2e8b57"; // green: part of the subgraph
export const OTHER_COLOR = "#4a7dbf"; // blue: remaining nodes

const SIZE = 320;
const RADIUS = 14;

export function escapeXml(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function renderPanel(item: ItemView, selected: number[]): string {
  const pos = layoutGraph(item.graph_id, item.nodes.length, item.edges);
  const chosen = new Set(selected);
  const parts: string[] = [
    `<svg viewBox="0 0 ${SIZE} ${SIZE}" xmlns="http://www.w3.org/2000/svg">`,
  ];
  for (const [src, dst] of item.edges) {
    const a = px(pos[src]);
    const b = px(pos[dst]);
    parts.push(
      `<line x1="${a.x}" y1="${a.y}" x2="${b.x}" y2="${b.y}" ` +
        `stroke="#999" stroke-width="1.5"/>`,
    );
  }
  item.nodes.forEach((node, i) => {
    const p = px(pos[i]);
    const fill = chosen.has(i) ? SELECTED_COLOR : OTHER_COLOR;
    parts.push(
      `<circle cx="${p.x}" cy="${p.y}" r="${RADIUS}" fill="${fill}"/>`,
      `<text x="${p.x}" y="${p.y + RADIUS + 11}" text-anchor="middle" ` +
        `font-size="10">${escapeXml(node.name)}</text>`,
    );
  });
  parts.push("</svg>");
  return parts.join("");
}

export function renderItemHeader(
  item: ItemView,
  position: number,
  total: number,
): string {
  return (
    `<p class="progress">Item ${position} of ${total}</p>` +
    `<p class="question">${escapeXml(item.question)}</p>` +
    `<p class="answers">Predicted answer: <b>${escapeXml(item.predicted)}</b>` +
    ` &middot; Ground truth: <b>${escapeXml(item.answer)}</b></p>`
  );
}

function px(p: Point): Point {
  return {
    x: Math.round(p.x * SIZE * 100) / 100,
    y: Math.round(p.y * SIZE * 100) / 100,
  };
}
