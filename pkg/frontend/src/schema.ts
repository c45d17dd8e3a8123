/**
 * CSV schemas produced by the simulator harness.  The plot tool consumes
 * exactly these files and never recomputes simulation quantities.
 */

export const STEPS_COLUMNS = [
  "step",
  "t",
  "dofs",
  "mass",
  "energy",
  "lambda",
  "newton_iters",
  ...[1, 2, 3, 4, 5, 6].map((i) => `eta_space_${i}`),
  ...[1, 2, 3, 4, 5, 6].map((i) => `eta_time_${i}`),
  "eta_noise",
  "mu_m1",
  "mu_0",
  "mu_1",
  "muh_m1",
  "muh_0",
  "muh_1",
] as const;

export const HISTOGRAM_COLUMNS = ["bin_left", "bin_right", "count"] as const;

export const EXPECT_COLUMNS = [
  "t",
  "energy_mean",
  "energy_se",
  "lambda_mean",
  "lambda_se",
] as const;

export type FigureKind = "lambda-trace" | "histogram" | "expectation";

/** Columns a figure kind requires from its primary inputs. */
export const REQUIRED_COLUMNS: Record<FigureKind, readonly string[]> = {
  "lambda-trace": ["t", "lambda"],
  histogram: HISTOGRAM_COLUMNS,
  expectation: EXPECT_COLUMNS,
};

/** Columns required of a deterministic overlay trace (steps.csv). */
export const DET_COLUMNS = ["t", "lambda", "energy"] as const;

export class SchemaError extends Error {
  readonly missing: string[];

  constructor(path: string, missing: string[]) {
    super(
      `schema mismatch in ${path}: missing column(s) ${missing
        .map((c) => `'${c}'`)
        .join(", ")}`,
    );
    this.missing = missing;
  }
}

export class EmptyDataError extends Error {
  constructor(path: string) {
    super(`no data rows in ${path}`);
  }
}
