import { describe, expect, it } from "vitest";
import { ItemView } from "../src/api";
import {
  escapeXml,
  OTHER_COLOR,
  renderItemHeader,
  renderPanel,
  SELECTED_COLOR,
} from "../src/render";

const ITEM: ItemView = {
  item_id: "p-00",
  graph_id: "g7",
  question_id: "q7",
  question: "what is the cat on",
  answer: "table",
  predicted: "table",
  structural_type: "query",
  semantic_type: "relation",
  nodes: [
    { name: "scene", bbox: [0, 0, 1, 1] },
    { name: "cat", bbox: [0.1, 0.1, 0.2, 0.2] },
    { name: "table", bbox: [0.3, 0.3, 0.4, 0.2] },
  ],
  edges: [
    [1, 2],
    [0, 1],
  ],
  selected_a: [1, 2],
  selected_b: [0],
};

describe("renderPanel", () => {
  it("colors exactly the selected nodes green", () => {
    const svg = renderPanel(ITEM, [1, 2]);
    expect(svg.split(SELECTED_COLOR).length - 1).toBe(2);
    expect(svg.split(OTHER_COLOR).length - 1).toBe(1);
  });

  it("uses identical positions for both panels of one item", () => {
    const strip = (s: string) => s.replace(/fill="[^"]*"/g, "");
    expect(strip(renderPanel(ITEM, ITEM.selected_a))).toBe(
      strip(renderPanel(ITEM, ITEM.selected_b)),
    );
  });

  it("draws one line per edge and labels only nodes, never edges", () => {
    const svg = renderPanel(ITEM, []);
    expect(svg.split("<line ").length - 1).toBe(2);
    expect(svg.split("<text ").length - 1).toBe(ITEM.nodes.length);
  });

  it("never leaks method names", () => {
    for (const name of ["intrinsic", "gnnexplainer", "intgrad", "random"]) {
      expect(renderPanel(ITEM, ITEM.selected_a)).not.toContain(name);
    }
  });

  it("escapes node names", () => {
    const item = {
      ...ITEM,
      nodes: [{ name: "a<b", bbox: [0, 0, 1, 1] }],
      edges: [],
    };
    const svg = renderPanel(item, []);
    expect(svg).toContain("a&lt;b");
    expect(svg).not.toContain("a<b");
  });
});

describe("renderItemHeader", () => {
  it("shows progress, question, and both answers", () => {
    const html = renderItemHeader(ITEM, 3, 18);
    expect(html).toContain("Item 3 of 18");
    expect(html).toContain("what is the cat on");
    expect(html).toContain("table");
  });
});

describe("escapeXml", () => {
  it("escapes the XML special characters", () => {
    expect(escapeXml(`<a & "b">`)).toBe("&lt;a &amp; &quot;b&quot;&gt;");
  });
});
