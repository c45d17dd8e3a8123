import { readFileSync } from "fs";
import Papa from "papaparse";

import { EmptyDataError, SchemaError } from "./schema.js";

export type Row = Record<string, number>;

/** Parse a CSV file and validate that the required columns are present. */
export function loadCsv(path: string, required: readonly string[]): Row[] {
  const text = readFileSync(path, "utf-8");
  const parsed = Papa.parse<Record<string, string>>(text.trim(), {
    header: true,
    skipEmptyLines: true,
  });
  const fields = parsed.meta.fields ?? [];
  const missing = required.filter((c) => !fields.includes(c));
  if (missing.length > 0) {
    throw new SchemaError(path, missing);
  }
  if (parsed.data.length === 0) {
    throw new EmptyDataError(path);
  }
  return parsed.data.map((raw) => {
    const row: Row = {};
    for (const field of fields) {
      row[field] = Number(raw[field]);
    }
    return row;
  });
}

export function column(rows: Row[], name: string): number[] {
  return rows.map((r) => r[name]);
}
