import { ApiClient, ApiError } from "./api.js";
import { ENCODING_DIM, formatEncoding, parseEncodingBits, presetEncoding } from "./encoding.js";
import { buildResultsView, scatterPoints } from "./render.js";
import { Store, applyResult, applyTransportFailure } from "./state.js";
import { DebouncedRequester } from "./slider.js";

const BASE_URL = (window as unknown as { SERVICE_URL?: string }).SERVICE_URL ?? "http://localhost:8008";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

const store = new Store();
const api = new ApiClient(BASE_URL);

const fileInput = el<HTMLInputElement>("file");
const ratioSelect = el<HTMLSelectElement>("ratio");
const slider = el<HTMLInputElement>("mu-slider");
const sliderLabel = el<HTMLSpanElement>("mu-label");
const customInput = el<HTMLInputElement>("custom-encoding");
const customApply = el<HTMLButtonElement>("custom-apply");
const banner = el<HTMLDivElement>("banner");
const errorCard = el<HTMLDivElement>("error-card");
const originalImg = el<HTMLImageElement>("original");
const reconImg = el<HTMLImageElement>("reconstruction");
const stripHost = el<HTMLDivElement>("gate-strip");
const nAmOut = el<HTMLSpanElement>("n-am");
const psnrOut = el<HTMLSpanElement>("psnr");
const costOut = el<HTMLSpanElement>("cost");
const scatterHost = el<HTMLDivElement>("scatter");

let muValues: number[] = [];

async function sendReconstruct(encoding: number[], signal: AbortSignal): Promise<void> {
  const s = store.get();
  if (s.currentImage === null || s.ratio === null) return;
  try {
    const resp = await api.reconstruct(
      {
        image: s.currentImage,
        ratio: s.ratio,
        encoding,
        return_truth_metrics: true,
      },
      signal,
    );
    store.update((prev) => applyResult(prev, resp, encoding));
  } catch (err) {
    if (err instanceof DOMException && err.name === "AbortError") return; // superseded
    const msg = err instanceof ApiError ? err.message : String(err);
    store.update((prev) => applyTransportFailure(prev, msg));
  }
}

const requester = new DebouncedRequester<number[]>(sendReconstruct, 150);

function currentDetentEncoding(): number[] {
  return presetEncoding(Number(slider.value));
}

function updateSliderLabel(): void {
  const k = Number(slider.value);
  const mu = muValues[k];
  sliderLabel.textContent = mu !== undefined ? `μ = ${mu}` : `detent ${k}`;
}

function renderStrip(view: ReturnType<typeof buildResultsView>): void {
  stripHost.replaceChildren();
  for (const row of view.strip) {
    const rowEl = document.createElement("div");
    rowEl.className = "strip-row";
    const label = document.createElement("span");
    label.className = "strip-label";
    label.textContent = row.family;
    rowEl.appendChild(label);
    for (const on of row.cells) {
      const cell = document.createElement("span");
      cell.className = on ? "cell on" : "cell off";
      rowEl.appendChild(cell);
    }
    stripHost.appendChild(rowEl);
  }
}

function renderScatter(): void {
  const pts = scatterPoints(store.get().history);
  const w = 320;
  const h = 200;
  const pad = 24;
  scatterHost.replaceChildren();
  if (pts.length === 0) return;
  const xs = pts.map((p) => p.x);
  const ys = pts.map((p) => p.y ?? 0);
  const xMin = Math.min(...xs);
  const xMax = Math.max(...xs);
  const yMin = Math.min(...ys);
  const yMax = Math.max(...ys);
  const sx = (x: number) => (xMax === xMin ? w / 2 : pad + ((x - xMin) / (xMax - xMin)) * (w - 2 * pad));
  const sy = (y: number) => (yMax === yMin ? h / 2 : h - pad - ((y - yMin) / (yMax - yMin)) * (h - 2 * pad));
  const svgNs = "http://www.w3.org/2000/svg";
  const svg = document.createElementNS(svgNs, "svg");
  svg.setAttribute("width", String(w));
  svg.setAttribute("height", String(h));
  for (const p of pts) {
    const c = document.createElementNS(svgNs, "circle");
    c.setAttribute("cx", String(sx(p.x)));
    c.setAttribute("cy", String(sy(p.y ?? 0)));
    c.setAttribute("r", "5");
    c.setAttribute("class", "dot");
    const title = document.createElementNS(svgNs, "title");
    title.textContent = p.tooltip;
    c.appendChild(title);
    svg.appendChild(c);
  }
  scatterHost.appendChild(svg);
}

store.subscribe((s) => {
  banner.textContent = s.banner ?? "";
  banner.hidden = s.banner === null;
  errorCard.textContent = s.errorCard ?? "";
  errorCard.hidden = s.errorCard === null;
  if (s.currentImage !== null) {
    originalImg.src = `data:image/png;base64,${s.currentImage}`;
  }
  if (s.lastResponse !== null && s.errorCard === null) {
    const view = buildResultsView(s.lastResponse);
    reconImg.src = `data:image/png;base64,${view.reconstruction}`;
    renderStrip(view);
    nAmOut.textContent = `${view.nAm[0]} gradient / ${view.nAm[1]} proximal`;
    psnrOut.textContent = view.psnrText;
    costOut.textContent = view.costText;
  }
  renderScatter();
});

fileInput.addEventListener("change", () => {
  const file = fileInput.files?.[0];
  if (!file) return;
  const reader = new FileReader();
  reader.onload = () => {
    const dataUrl = String(reader.result);
    const b64 = dataUrl.slice(dataUrl.indexOf(",") + 1);
    store.update((s) => ({ ...s, currentImage: b64 }));
    requester.fire(currentDetentEncoding());
  };
  reader.readAsDataURL(file);
});

ratioSelect.addEventListener("change", () => {
  store.update((s) => ({ ...s, ratio: Number(ratioSelect.value) }));
  requester.fire(currentDetentEncoding());
});

slider.addEventListener("input", () => {
  updateSliderLabel();
  const enc = currentDetentEncoding();
  store.update((s) => ({ ...s, muOrEncoding: enc }));
  requester.change(enc);
});

customApply.addEventListener("click", () => {
  const bits = parseEncodingBits(customInput.value);
  if (bits === null) {
    store.update((s) => applyTransportFailure(s, `encoding must be ${ENCODING_DIM} bits of 0/1`));
    return;
  }
  store.update((s) => ({ ...s, muOrEncoding: bits }));
  customInput.value = formatEncoding(bits);
  requester.fire(bits);
});

async function boot(): Promise<void> {
  try {
    const presets = await api.presets();
    muValues = [...presets.mu_values].sort((a, b) => a - b);
    ratioSelect.replaceChildren();
    for (const r of presets.ratios) {
      const opt = document.createElement("option");
      opt.value = String(r);
      opt.textContent = `${Math.round(r * 100)}%`;
      ratioSelect.appendChild(opt);
    }
    const first = presets.ratios[0];
    if (first !== undefined) {
      ratioSelect.value = String(first);
      store.update((s) => ({ ...s, ratio: first }));
    }
    slider.max = String(muValues.length - 1);
    updateSliderLabel();
  } catch (err) {
    const msg = err instanceof ApiError ? err.message : String(err);
    store.update((s) => applyTransportFailure(s, `cannot reach service: ${msg}`));
  }
}

void boot();
