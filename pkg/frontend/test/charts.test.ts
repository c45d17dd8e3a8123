import { mkdtempSync, readFileSync, statSync, writeFileSync } from "fs";
import { tmpdir } from "os";
import { join } from "path";
import { execFileSync } from "child_process";

import { describe, expect, it } from "vitest";

import { loadCsv } from "../src/csv.js";
import { renderFigure } from "../src/charts.js";
import { EmptyDataError, SchemaError } from "../src/schema.js";

const FIX = join(__dirname, "fixtures");
const CLI = join(__dirname, "..", "dist", "cli.js");

function tmp(name: string): string {
  return join(mkdtempSync(join(tmpdir(), "schfem-plot-")), name);
}

describe("csv loading", () => {
  it("loads steps rows with numeric fields", () => {
    const rows = loadCsv(join(FIX, "steps_golden.csv"), ["t", "lambda"]);
    expect(rows.length).toBe(3);
    expect(typeof rows[0].lambda).toBe("number");
  });

  it("raises a named-column error on schema mismatch", () => {
    try {
      loadCsv(join(FIX, "bad_histogram.csv"), ["bin_left", "bin_right", "count"]);
      expect.unreachable("should have thrown");
    } catch (err) {
      expect(err).toBeInstanceOf(SchemaError);
      expect((err as SchemaError).missing).toEqual(["count"]);
      expect((err as Error).message).toContain("'count'");
    }
  });

  it("raises on empty data", () => {
    expect(() =>
      loadCsv(join(FIX, "empty_expect.csv"), ["t", "energy_mean"]),
    ).toThrow(EmptyDataError);
  });
});

describe("figure rendering", () => {
  it("renders a lambda trace from the 3-row golden file", () => {
    const svg = renderFigure({
      kind: "lambda-trace",
      inputs: [join(FIX, "steps_golden.csv")],
      out: "unused.svg",
    });
    expect(svg).toContain("<svg");
    expect(svg).toContain("polyline");
    expect(svg.length).toBeGreaterThan(500);
  });

  it("renders overlaid traces for several realizations plus deterministic", () => {
    const svg = renderFigure({
      kind: "lambda-trace",
      inputs: [join(FIX, "steps_r0.csv"), join(FIX, "steps_r1.csv")],
      det: join(FIX, "det_steps.csv"),
      out: "unused.svg",
    });
    expect(svg).toContain("steps_r0");
    expect(svg).toContain("steps_r1");
    expect(svg).toContain("deterministic");
  });

  it("annotates the histogram with the total count", () => {
    const svg = renderFigure({
      kind: "histogram",
      inputs: [join(FIX, "histogram.csv")],
      det: join(FIX, "det_steps.csv"),
      out: "unused.svg",
    });
    expect(svg).toContain("n = 20");
    expect(svg).toContain("rect"); // bars
    expect(svg).toContain("deterministic lambda (scaled)");
  });

  it("renders expectation curves with error bands for two inputs", () => {
    const svg = renderFigure({
      kind: "expectation",
      inputs: [join(FIX, "expect_h16.csv"), join(FIX, "expect_h32.csv")],
      out: "unused.svg",
    });
    expect(svg).toContain("expect_h16");
    expect(svg).toContain("expect_h32");
    expect(svg).toContain("polygon"); // standard-error bands
    expect(svg).toContain("Expected discrete energy");
    expect(svg).toContain("Expected principal eigenvalue");
  });
});

describe("cli end-to-end", () => {
  it("exits 0 and writes nonempty images for all three kinds", () => {
    const cases: [string, string[]][] = [
      ["lambda-trace", ["--in", join(FIX, "steps_golden.csv")]],
      ["histogram", ["--in", join(FIX, "histogram.csv"),
                     "--det", join(FIX, "det_steps.csv")]],
      ["expectation", ["--in", join(FIX, "expect_h16.csv"),
                       "--in", join(FIX, "expect_h32.csv")]],
    ];
    for (const [kind, extra] of cases) {
      const out = tmp(`${kind}.svg`);
      execFileSync("node", [CLI, kind, ...extra, "--out", out]);
      expect(statSync(out).size).toBeGreaterThan(0);
      expect(readFileSync(out, "utf-8")).toContain("<svg");
    }
  });

  it("exits nonzero with a named-column message on schema mismatch", () => {
    const out = tmp("bad.svg");
    let failed = false;
    try {
      execFileSync(
        "node",
        [CLI, "histogram", "--in", join(FIX, "bad_histogram.csv"), "--out", out],
        { stdio: "pipe" },
      );
    } catch (err: any) {
      failed = true;
      expect(err.status).not.toBe(0);
      expect(String(err.stderr)).toContain("'count'");
    }
    expect(failed).toBe(true);
  });
});
