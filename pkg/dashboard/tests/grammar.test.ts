import { describe, expect, it } from "vitest";
import { evaluate, parse, validateCode } from "../src/grammar.js";

function run(code: string, xs: number[] = [1, 2, 3], params: Record<string, number> = {}) {
  return evaluate(parse(code), xs, params);
}

describe("evaluation mirrors the reference language", () => {
  it("computes the mean", () => {
    expect(run("mean(xs)", [1, 2, 3])).toBe(2);
  });

  it("computes a range", () => {
    expect(run("max(xs) - min(xs)", [1, 5, 2])).toBe(4);
  });

  it("binds parameters as p_<key>", () => {
    expect(run("sum(xs) / p_n", [2, 4, 6], { n: 3 })).toBe(4);
  });

  it("population standard deviation", () => {
    // Hand-computed: mean 5, variance 4, sd 2.
    expect(run("sd(xs)", [2, 4, 4, 4, 5, 5, 7, 9])).toBe(2);
  });

  it("median of even and odd windows", () => {
    expect(run("median(xs)", [5, 1, 3])).toBe(3);
    expect(run("median(xs)", [4, 1, 3, 2])).toBe(2.5);
  });

  it("respects precedence and associativity", () => {
    expect(run("1 + 2 * 3")).toBe(7);
    expect(run("(1 + 2) * 3")).toBe(9);
    expect(run("2 ^ 3 ^ 2")).toBe(512);
    expect(run("-2 ^ 2")).toBe(-4);
    expect(run("2 ^ -1")).toBe(0.5);
  });

  it("rejects division by zero", () => {
    expect(() => run("1 / (mean(xs) - 2)", [1, 2, 3])).toThrow(/division by zero/);
  });

  it("rejects the window in arithmetic", () => {
    expect(() => run("xs + 1")).toThrow(/window/);
  });

  it("rejects non-finite results", () => {
    expect(() => run("1e308 + 1e308")).toThrow(/finite/);
  });

  it("enforces the step budget", () => {
    const code = Array(200).fill("1").join("+");
    expect(() => evaluate(parse(code), [1], {}, 50)).toThrow(/step limit/);
  });
});

describe("validateCode mirrors the deploy-time checks", () => {
  it("accepts the minimal program", () => {
    expect(validateCode("mean(xs)")).toEqual([]);
  });

  it("names unknown identifiers", () => {
    const diags = validateCode("mean(ys)");
    expect(diags).toHaveLength(1);
    expect(diags[0].message).toContain("unknown identifier ys");
  });

  it("names unknown functions", () => {
    expect(validateCode("variance(xs)")[0].message).toContain("unknown function variance");
  });

  it("rejects a bare window result dynamically", () => {
    expect(validateCode("xs")[0].message).toBe("result is not a scalar number");
  });

  it("reports syntax errors with positions", () => {
    const diags = validateCode("mean(xs) +");
    expect(diags[0].line).toBe(1);
    expect(diags[0].column).toBe(11);
  });

  it("reports every static diagnostic", () => {
    expect(validateCode("foo(ys) + bar(zs)")).toHaveLength(4);
  });

  it("binds probe parameters so parameterized modules validate", () => {
    expect(validateCode("sum(xs) / p_n")).toEqual([]);
  });

  it("catches probe-time evaluation failures", () => {
    expect(validateCode("1 / (count(xs) - 3)")[0].message).toContain("division by zero");
  });

  it("rejects arity mistakes", () => {
    expect(validateCode("mean(xs, xs)")[0].message).toContain("exactly 1 argument");
  });

  it("guards against pathological nesting", () => {
    const code = "(".repeat(300) + "1" + ")".repeat(300);
    expect(validateCode(code)[0].message).toContain("deeper");
  });

  it("never throws on arbitrary input", () => {
    for (const junk of ["", "@@@", "mean(", "1..2", ")(", "p_", "xs xs", "\n\n^"]) {
      expect(() => validateCode(junk)).not.toThrow();
    }
  });
});
