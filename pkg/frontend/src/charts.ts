import { basename } from "path";

import { column, loadCsv } from "./csv.js";
import { DET_COLUMNS, FigureKind, REQUIRED_COLUMNS } from "./schema.js";
import { PanelOptions, Series, svgDocument } from "./svg.js";

const PALETTE = ["#4361ee", "#e63946", "#2d6a4f", "#b5179e", "#f77f00",
                 "#577590"];

export interface FigureSpec {
  kind: FigureKind;
  inputs: string[];
  det?: string;
  out: string;
}

function label(path: string): string {
  return basename(path).replace(/\.csv$/, "");
}

export function lambdaTraceFigure(spec: FigureSpec): string {
  const series: Series[] = spec.inputs.map((path, i) => {
    const rows = loadCsv(path, REQUIRED_COLUMNS["lambda-trace"]);
    return {
      x: column(rows, "t"),
      y: column(rows, "lambda"),
      color: PALETTE[i % PALETTE.length],
      label: label(path),
      width: 1.3,
    };
  });
  if (spec.det) {
    const rows = loadCsv(spec.det, DET_COLUMNS);
    series.push({
      x: column(rows, "t"),
      y: column(rows, "lambda"),
      color: "#222",
      label: "deterministic",
      dash: "6,3",
      width: 1.6,
    });
  }
  return svgDocument([
    {
      title: "Principal eigenvalue per realization",
      xLabel: "t",
      yLabel: "lambda",
      series,
    },
  ]);
}

export function histogramFigure(spec: FigureSpec): string {
  const rows = loadCsv(spec.inputs[0], REQUIRED_COLUMNS.histogram);
  const counts = column(rows, "count");
  const total = counts.reduce((a, b) => a + b, 0);
  const panel: PanelOptions = {
    title: "Peak times of the principal eigenvalue",
    xLabel: "peak time",
    yLabel: "count",
    bars: {
      lefts: column(rows, "bin_left"),
      rights: column(rows, "bin_right"),
      counts,
      color: "#4361ee",
      label: "peak-time histogram",
    },
    annotations: [`n = ${total}`],
  };
  if (spec.det) {
    // overlay the deterministic eigenvalue trace scaled to the count axis
    const det = loadCsv(spec.det, DET_COLUMNS);
    panel.series = [
      {
        x: column(det, "t"),
        y: column(det, "lambda"),
        color: "#222",
        label: "deterministic lambda (scaled)",
        width: 1.6,
        rightAxis: true,
      },
    ];
    panel.rightYLabel = "lambda (deterministic)";
  }
  return svgDocument([panel]);
}

export function expectationFigure(spec: FigureSpec): string {
  const energySeries: Series[] = [];
  const lambdaSeries: Series[] = [];
  spec.inputs.forEach((path, i) => {
    const rows = loadCsv(path, REQUIRED_COLUMNS.expectation);
    const t = column(rows, "t");
    const color = PALETTE[i % PALETTE.length];
    const em = column(rows, "energy_mean");
    const es = column(rows, "energy_se");
    energySeries.push({
      x: t,
      y: em,
      color,
      label: label(path),
      band: bandAround(em, es),
    });
    const lm = column(rows, "lambda_mean");
    const ls = column(rows, "lambda_se");
    lambdaSeries.push({
      x: t,
      y: lm,
      color,
      label: label(path),
      band: bandAround(lm, ls),
    });
  });
  if (spec.det) {
    const det = loadCsv(spec.det, DET_COLUMNS);
    const t = column(det, "t");
    energySeries.push({
      x: t, y: column(det, "energy"), color: "#222",
      label: "deterministic", dash: "6,3", width: 1.6,
    });
    lambdaSeries.push({
      x: t, y: column(det, "lambda"), color: "#222",
      label: "deterministic", dash: "6,3", width: 1.6,
    });
  }
  return svgDocument([
    {
      title: "Expected discrete energy",
      xLabel: "t",
      yLabel: "E[energy]",
      series: energySeries,
    },
    {
      title: "Expected principal eigenvalue",
      xLabel: "t",
      yLabel: "E[lambda]",
      series: lambdaSeries,
    },
  ]);
}

function bandAround(mean: number[], se: number[]) {
  const finite = se.every((v) => Number.isFinite(v));
  if (!finite) return undefined;
  return {
    lo: mean.map((m, i) => m - se[i]),
    hi: mean.map((m, i) => m + se[i]),
  };
}

export function renderFigure(spec: FigureSpec): string {
  switch (spec.kind) {
    case "lambda-trace":
      return lambdaTraceFigure(spec);
    case "histogram":
      return histogramFigure(spec);
    case "expectation":
      return expectationFigure(spec);
  }
}
