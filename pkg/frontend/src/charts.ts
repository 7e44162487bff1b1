import type { RoundRecord } from "./types.js";

// Hand-rolled SVG charts. Every rendered point carries its payload value
// verbatim in a data-value attribute so the display can be checked against
// the service response; the pixel math never feeds back into the numbers.

const SVG_NS = "http://www.w3.org/2000/svg";

const WIDTH = 560;
const HEIGHT = 220;
const PAD = { left: 44, right: 16, top: 14, bottom: 28 };

type SeriesPoint = { round: number; value: number };

function svgEl<K extends keyof SVGElementTagNameMap>(
  tag: K,
  attrs: Record<string, string>,
): SVGElementTagNameMap[K] {
  const el = document.createElementNS(SVG_NS, tag);
  for (const [k, v] of Object.entries(attrs)) {
    el.setAttribute(k, v);
  }
  return el;
}

function xScale(rounds: number[]): (round: number) => number {
  const lo = Math.min(...rounds);
  const hi = Math.max(...rounds);
  const span = hi - lo;
  const inner = WIDTH - PAD.left - PAD.right;
  if (span === 0) {
    return () => PAD.left + inner / 2;
  }
  return (round) => PAD.left + ((round - lo) / span) * inner;
}

function drawSeries(
  svg: SVGSVGElement,
  points: SeriesPoint[],
  toX: (round: number) => number,
  toY: (value: number) => number,
  lineClass: string,
  pointClass: string,
): void {
  if (points.length > 1) {
    const coords = points.map((p) => `${toX(p.round)},${toY(p.value)}`).join(" ");
    svg.appendChild(svgEl("polyline", { points: coords, class: lineClass, fill: "none" }));
  }
  for (const p of points) {
    const circle = svgEl("circle", {
      cx: String(toX(p.round)),
      cy: String(toY(p.value)),
      r: "4",
      class: pointClass,
      "data-round": String(p.round),
      "data-value": String(p.value),
    });
    svg.appendChild(circle);
  }
}

/** EM and F1 per round as two line series on a shared 0..1 axis. */
export function renderMetricsChart(container: HTMLElement, records: RoundRecord[]): void {
  container.replaceChildren();
  const svg = svgEl("svg", {
    viewBox: `0 0 ${WIDTH} ${HEIGHT}`,
    class: "metrics-chart",
    role: "img",
  });

  const rounds = records.map((r) => r.round);
  const toX = xScale(rounds);
  const innerH = HEIGHT - PAD.top - PAD.bottom;
  // metrics live in [0, 1]; a fixed axis keeps runs comparable
  const toY = (value: number) => PAD.top + (1 - value) * innerH;

  for (const frac of [0, 0.5, 1]) {
    const y = toY(frac);
    svg.appendChild(
      svgEl("line", {
        x1: String(PAD.left),
        y1: String(y),
        x2: String(WIDTH - PAD.right),
        y2: String(y),
        class: "gridline",
      }),
    );
    const label = svgEl("text", {
      x: String(PAD.left - 8),
      y: String(y + 4),
      "text-anchor": "end",
      class: "axis-label",
    });
    label.textContent = frac.toFixed(1);
    svg.appendChild(label);
  }

  const em: SeriesPoint[] = [];
  const f1: SeriesPoint[] = [];
  for (const r of records) {
    if (r.val_em !== null) {
      em.push({ round: r.round, value: r.val_em });
    }
    if (r.val_f1 !== null) {
      f1.push({ round: r.round, value: r.val_f1 });
    }
  }
  drawSeries(svg, em, toX, toY, "em-line", "em-point");
  drawSeries(svg, f1, toX, toY, "f1-line", "f1-point");

  for (const r of records) {
    const tick = svgEl("text", {
      x: String(toX(r.round)),
      y: String(HEIGHT - 8),
      "text-anchor": "middle",
      class: "axis-label",
    });
    tick.textContent = String(r.round);
    svg.appendChild(tick);
  }

  container.appendChild(svg);
}

/** Wall time per round as bars. */
export function renderTimesChart(container: HTMLElement, records: RoundRecord[]): void {
  container.replaceChildren();
  const svg = svgEl("svg", {
    viewBox: `0 0 ${WIDTH} ${HEIGHT}`,
    class: "times-chart",
    role: "img",
  });

  const innerW = WIDTH - PAD.left - PAD.right;
  const innerH = HEIGHT - PAD.top - PAD.bottom;
  const maxTime = Math.max(...records.map((r) => r.wall_time), 0);
  const slot = innerW / Math.max(records.length, 1);
  const barW = Math.min(slot * 0.6, 48);

  records.forEach((r, i) => {
    const h = maxTime > 0 ? (r.wall_time / maxTime) * innerH : 0;
    const x = PAD.left + slot * i + (slot - barW) / 2;
    const bar = svgEl("rect", {
      x: String(x),
      y: String(PAD.top + innerH - h),
      width: String(barW),
      height: String(h),
      class: "time-bar",
      "data-round": String(r.round),
      "data-value": String(r.wall_time),
    });
    svg.appendChild(bar);

    const tick = svgEl("text", {
      x: String(x + barW / 2),
      y: String(HEIGHT - 8),
      "text-anchor": "middle",
      class: "axis-label",
    });
    tick.textContent = String(r.round);
    svg.appendChild(tick);
  });

  container.appendChild(svg);
}
