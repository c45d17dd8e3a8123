/**
 * Minimal hand-rolled SVG chart primitives: one x/y panel with linear
 * scales, polylines, shaded bands, bars and a legend.  No DOM required.
 */

export interface Series {
  x: number[];
  y: number[];
  color: string;
  label?: string;
  width?: number;
  dash?: string;
  /** lower/upper band around y (e.g. +- standard error) */
  band?: { lo: number[]; hi: number[] };
  /** plot against the secondary (right) y-axis */
  rightAxis?: boolean;
}

export interface Bars {
  lefts: number[];
  rights: number[];
  counts: number[];
  color: string;
  label?: string;
}

export interface PanelOptions {
  title: string;
  xLabel: string;
  yLabel: string;
  rightYLabel?: string;
  series?: Series[];
  bars?: Bars;
  annotations?: string[];
  width?: number;
  height?: number;
}

interface Scale {
  (v: number): number;
}

function linearScale(d0: number, d1: number, r0: number, r1: number): Scale {
  const span = d1 - d0 || 1;
  return (v: number) => r0 + ((v - d0) / span) * (r1 - r0);
}

function extent(values: number[]): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (Number.isFinite(v)) {
      lo = Math.min(lo, v);
      hi = Math.max(hi, v);
    }
  }
  if (!Number.isFinite(lo)) return [0, 1];
  if (lo === hi) return [lo - 1, hi + 1];
  return [lo, hi];
}

function pad([lo, hi]: [number, number], frac = 0.05): [number, number] {
  const d = (hi - lo) * frac;
  return [lo - d, hi + d];
}

function ticks(lo: number, hi: number, n = 6): number[] {
  const raw = (hi - lo) / n;
  const mag = Math.pow(10, Math.floor(Math.log10(Math.abs(raw) || 1)));
  const step = [1, 2, 5, 10].map((m) => m * mag).find((s) => s >= raw) ?? raw;
  const first = Math.ceil(lo / step) * step;
  const out: number[] = [];
  for (let v = first; v <= hi + 1e-12 * Math.abs(step); v += step) {
    out.push(Math.abs(v) < 1e-12 * step ? 0 : v);
  }
  return out;
}

function fmt(v: number): string {
  if (v === 0) return "0";
  const a = Math.abs(v);
  if (a >= 1e4 || a < 1e-3) return v.toExponential(1);
  return String(Number(v.toPrecision(4)));
}

function esc(text: string): string {
  return text.replace(/&/g, "&amp;").replace(/</g, "&lt;").replace(/>/g, "&gt;");
}

function polylinePoints(xs: number[], ys: number[], sx: Scale, sy: Scale): string {
  const parts: string[] = [];
  for (let i = 0; i < xs.length; i++) {
    if (Number.isFinite(xs[i]) && Number.isFinite(ys[i])) {
      parts.push(`${sx(xs[i]).toFixed(2)},${sy(ys[i]).toFixed(2)}`);
    }
  }
  return parts.join(" ");
}

/** Render one chart panel to an SVG fragment inside the given viewport. */
export function renderPanel(opts: PanelOptions, offsetY = 0): string {
  const W = opts.width ?? 760;
  const H = opts.height ?? 420;
  const m = { left: 72, right: opts.rightYLabel ? 72 : 24, top: 40, bottom: 48 };
  const iw = W - m.left - m.right;
  const ih = H - m.top - m.bottom;

  const series = opts.series ?? [];
  const leftSeries = series.filter((s) => !s.rightAxis);
  const rightSeries = series.filter((s) => s.rightAxis);

  const xsAll = series.flatMap((s) => s.x);
  if (opts.bars) {
    xsAll.push(...opts.bars.lefts, ...opts.bars.rights);
  }
  const [x0, x1] = pad(extent(xsAll), 0.02);

  const leftVals = leftSeries.flatMap((s) =>
    s.band ? [...s.y, ...s.band.lo, ...s.band.hi] : s.y,
  );
  if (opts.bars) {
    leftVals.push(0, ...opts.bars.counts);
  }
  const [y0, y1] = pad(extent(leftVals));
  const [r0, r1] = pad(extent(rightSeries.flatMap((s) => s.y)));

  const sx = linearScale(x0, x1, m.left, m.left + iw);
  const sy = linearScale(y0, y1, m.top + ih, m.top);
  const sr = linearScale(r0, r1, m.top + ih, m.top);

  const parts: string[] = [];
  parts.push(`<g transform="translate(0,${offsetY})">`);
  parts.push(
    `<rect x="${m.left}" y="${m.top}" width="${iw}" height="${ih}" fill="white" stroke="#ccc"/>`,
  );

  for (const tx of ticks(x0, x1)) {
    const px = sx(tx).toFixed(2);
    parts.push(
      `<line x1="${px}" y1="${m.top}" x2="${px}" y2="${m.top + ih}" stroke="#eee"/>`,
      `<text x="${px}" y="${m.top + ih + 16}" font-size="11" text-anchor="middle">${fmt(tx)}</text>`,
    );
  }
  for (const ty of ticks(y0, y1)) {
    const py = sy(ty).toFixed(2);
    parts.push(
      `<line x1="${m.left}" y1="${py}" x2="${m.left + iw}" y2="${py}" stroke="#eee"/>`,
      `<text x="${m.left - 6}" y="${py}" font-size="11" text-anchor="end" dominant-baseline="middle">${fmt(ty)}</text>`,
    );
  }
  if (rightSeries.length > 0) {
    for (const ty of ticks(r0, r1)) {
      const py = sr(ty).toFixed(2);
      parts.push(
        `<text x="${m.left + iw + 6}" y="${py}" font-size="11" text-anchor="start" dominant-baseline="middle">${fmt(ty)}</text>`,
      );
    }
  }

  if (opts.bars) {
    const { lefts, rights, counts, color } = opts.bars;
    for (let i = 0; i < counts.length; i++) {
      const xpx = sx(lefts[i]);
      const wpx = Math.max(sx(rights[i]) - xpx - 1, 1);
      const ypx = sy(counts[i]);
      const hpx = sy(Math.max(y0, 0)) - ypx;
      parts.push(
        `<rect x="${xpx.toFixed(2)}" y="${ypx.toFixed(2)}" width="${wpx.toFixed(2)}" height="${Math.max(hpx, 0).toFixed(2)}" fill="${color}" fill-opacity="0.65"/>`,
      );
    }
  }

  for (const s of series) {
    const sv = s.rightAxis ? sr : sy;
    if (s.band) {
      const fwd = polylinePoints(s.x, s.band.hi, sx, sv);
      const bwdX = [...s.x].reverse();
      const bwdY = [...s.band.lo].reverse();
      const bwd = polylinePoints(bwdX, bwdY, sx, sv);
      parts.push(
        `<polygon points="${fwd} ${bwd}" fill="${s.color}" fill-opacity="0.18" stroke="none"/>`,
      );
    }
    const dash = s.dash ? ` stroke-dasharray="${s.dash}"` : "";
    parts.push(
      `<polyline points="${polylinePoints(s.x, s.y, sx, sv)}" fill="none" stroke="${s.color}" stroke-width="${s.width ?? 1.5}"${dash}/>`,
    );
  }

  parts.push(
    `<text x="${W / 2}" y="20" font-size="14" text-anchor="middle" font-weight="bold">${esc(opts.title)}</text>`,
    `<text x="${W / 2}" y="${H - 8}" font-size="12" text-anchor="middle">${esc(opts.xLabel)}</text>`,
    `<text transform="rotate(-90)" x="${-(m.top + ih / 2)}" y="16" font-size="12" text-anchor="middle">${esc(opts.yLabel)}</text>`,
  );
  if (opts.rightYLabel) {
    parts.push(
      `<text transform="rotate(90)" x="${m.top + ih / 2}" y="${-(W - 16)}" font-size="12" text-anchor="middle">${esc(opts.rightYLabel)}</text>`,
    );
  }

  let ly = m.top + 14;
  const legendItems: { color: string; label: string; dash?: string }[] = [];
  for (const s of series) {
    if (s.label) legendItems.push({ color: s.color, label: s.label, dash: s.dash });
  }
  if (opts.bars?.label) {
    legendItems.push({ color: opts.bars.color, label: opts.bars.label });
  }
  for (const item of legendItems) {
    const dash = item.dash ? ` stroke-dasharray="${item.dash}"` : "";
    parts.push(
      `<line x1="${m.left + 10}" y1="${ly}" x2="${m.left + 34}" y2="${ly}" stroke="${item.color}" stroke-width="2"${dash}/>`,
      `<text x="${m.left + 40}" y="${ly + 4}" font-size="11">${esc(item.label)}</text>`,
    );
    ly += 16;
  }
  for (const note of opts.annotations ?? []) {
    parts.push(
      `<text x="${m.left + iw - 8}" y="${ly + 4}" font-size="11" text-anchor="end">${esc(note)}</text>`,
    );
    ly += 16;
  }

  parts.push("</g>");
  return parts.join("\n");
}

/** Wrap a stack of panels into a complete SVG document. */
export function svgDocument(panels: PanelOptions[]): string {
  const W = Math.max(...panels.map((p) => p.width ?? 760));
  const heights = panels.map((p) => p.height ?? 420);
  const H = heights.reduce((a, b) => a + b, 0);
  const body = panels
    .map((p, i) =>
      renderPanel(p, heights.slice(0, i).reduce((a, b) => a + b, 0)),
    )
    .join("\n");
  return [
    `<svg xmlns="http://www.w3.org/2000/svg" width="${W}" height="${H}" viewBox="0 0 ${W} ${H}">`,
    `<rect width="${W}" height="${H}" fill="white"/>`,
    body,
    "</svg>",
  ].join("\n");
}
