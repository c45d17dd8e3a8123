#!/usr/bin/env node
/**
 * plot <kind> --in <csv> [--in <csv> ...] [--det <csv>] --out <img>
 *
 * Pure CSV -> SVG transform over the simulator's documented schemas;
 * schema mismatches exit with a named-column error.
 */

import { writeFileSync } from "fs";
import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { renderFigure } from "./charts.js";
import { EmptyDataError, SchemaError } from "./schema.js";

export async function main(argv: string[]): Promise<number> {
  const args = await yargs(argv)
    .command("$0 <kind>", "render one figure from simulator CSV output", (y) =>
      y
        .positional("kind", {
          choices: ["lambda-trace", "histogram", "expectation"] as const,
          describe: "figure kind",
          demandOption: true,
        })
        .option("in", {
          type: "string",
          array: true,
          demandOption: true,
          describe: "input CSV (repeatable for overlaid curves)",
        })
        .option("det", {
          type: "string",
          describe: "deterministic steps.csv overlay",
        })
        .option("out", {
          type: "string",
          demandOption: true,
          describe: "output SVG path",
        }),
    )
    .strict()
    .fail((msg, err) => {
      throw err ?? new Error(msg);
    })
    .parse();

  const svg = renderFigure({
    kind: args.kind as "lambda-trace" | "histogram" | "expectation",
    inputs: args.in as string[],
    det: args.det as string | undefined,
    out: args.out as string,
  });
  writeFileSync(args.out as string, svg);
  console.log(`wrote ${args.out}`);
  return 0;
}

const isMain =
  process.argv[1] !== undefined &&
  import.meta.url.endsWith(process.argv[1].split("/").pop() ?? "");

if (isMain) {
  main(hideBin(process.argv))
    .then((code) => process.exit(code))
    .catch((err) => {
      if (err instanceof SchemaError || err instanceof EmptyDataError) {
        console.error(`error: ${err.message}`);
      } else {
        console.error(`error: ${err?.message ?? err}`);
      }
      process.exit(1);
    });
}
