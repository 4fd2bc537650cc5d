import type { HistoryPoint, ReconstructResponse } from "./types.js";
import { formatEncoding } from "./encoding.js";

export type StripRow = {
  family: "gradient" | "proximal";
  cells: boolean[]; // one per stage, true = executed
};

export type ScatterPoint = {
  x: number; // dynamic GFLOPs
  y: number | null; // PSNR dB, null when truth metrics were not requested
  tooltip: string;
};

export type ResultsView = {
  reconstruction: string;
  strip: StripRow[];
  nAm: [number, number];
  psnrText: string;
  costText: string;
  fullPath: boolean;
};

/** Executed-module counts per family, derived from the mask alone. */
export function nAmFromMask(mask: boolean[][]): [number, number] {
  let g = 0;
  let p = 0;
  for (const [gOn, pOn] of mask) {
    if (gOn) g += 1;
    if (pOn) p += 1;
  }
  return [g, p];
}

/** Two rows of K cells each; filled cells mark executed modules. */
export function gateStrip(mask: boolean[][]): StripRow[] {
  return [
    { family: "gradient", cells: mask.map((row) => row[0]) },
    { family: "proximal", cells: mask.map((row) => row[1]) },
  ];
}

export function scatterPoints(history: HistoryPoint[]): ScatterPoint[] {
  return history.map((pt) => ({
    x: pt.dynamic_gflops,
    y: pt.psnr_db,
    tooltip:
      `encoding ${formatEncoding(pt.encoding)} — ${pt.dynamic_gflops.toFixed(3)} GFLOPs` +
      (pt.psnr_db === null ? "" : `, ${pt.psnr_db.toFixed(2)} dB`),
  }));
}

export function buildResultsView(resp: ReconstructResponse): ResultsView {
  const nAm = nAmFromMask(resp.path_mask);
  const fullPath = resp.path_mask.every((row) => row[0] && row[1]);
  const costText = fullPath
    ? `${resp.dynamic_gflops.toFixed(3)} GFLOPs (= static, full path)`
    : `${resp.dynamic_gflops.toFixed(3)} of ${resp.static_gflops.toFixed(3)} GFLOPs`;
  return {
    reconstruction: resp.reconstruction,
    strip: gateStrip(resp.path_mask),
    nAm,
    psnrText: typeof resp.psnr_db === "number" ? `${resp.psnr_db.toFixed(2)} dB` : "—",
    costText,
    fullPath,
  };
}
