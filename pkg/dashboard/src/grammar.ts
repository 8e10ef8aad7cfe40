// Client-side mirror of the reference expression language, used by the
// deploy panel for inline feedback. Advisory only: the gateway re-validates
// every deployment with the authoritative implementation.
//
// Grammar:
//   expr    := term (("+" | "-") term)*
//   term    := unary (("*" | "/") unary)*
//   unary   := "-" unary | power
//   power   := primary ("^" unary)?        right-associative
//   primary := NUMBER | IDENT | IDENT "(" expr ")" | "(" expr ")"

export interface Diagnostic {
  line: number;
  column: number;
  message: string;
}

type FnKind = "window" | "scalar";

const FUNCTIONS: Record<string, { kind: FnKind; apply: (arg: any) => number }> = {
  mean: { kind: "window", apply: (xs: number[]) => sum(xs) / xs.length },
  median: { kind: "window", apply: median },
  sum: { kind: "window", apply: sum },
  count: { kind: "window", apply: (xs: number[]) => xs.length },
  min: { kind: "window", apply: (xs: number[]) => Math.min(...xs) },
  max: { kind: "window", apply: (xs: number[]) => Math.max(...xs) },
  sd: { kind: "window", apply: populationSd },
  first: { kind: "window", apply: (xs: number[]) => xs[0] },
  last: { kind: "window", apply: (xs: number[]) => xs[xs.length - 1] },
  abs: { kind: "scalar", apply: Math.abs },
  sqrt: { kind: "scalar", apply: sqrtChecked },
};

const WINDOW_NAME = "xs";
const PARAM_PREFIX = "p_";
const MAX_DEPTH = 100;
const STEP_LIMIT = 1_000_000;
const PROBE_BATCH = [1.0, 2.0, 3.0];

function sum(xs: number[]): number {
  let total = 0;
  for (const x of xs) total += x;
  return total;
}

function median(xs: number[]): number {
  const ordered = [...xs].sort((a, b) => a - b);
  const mid = Math.floor(ordered.length / 2);
  return ordered.length % 2 ? ordered[mid] : (ordered[mid - 1] + ordered[mid]) / 2;
}

function populationSd(xs: number[]): number {
  const m = sum(xs) / xs.length;
  return Math.sqrt(sum(xs.map((x) => (x - m) ** 2)) / xs.length);
}

function sqrtChecked(x: number): number {
  if (x < 0) throw new EvalFailure(`math domain error in sqrt(${x})`);
  return Math.sqrt(x);
}

// --- lexer -----------------------------------------------------------------

interface Token {
  kind: string; // "number" | "ident" | operator char | "eof"
  text: string;
  line: number;
  column: number;
}

class SyntaxFailure extends Error {
  diagnostic: Diagnostic;
  constructor(line: number, column: number, message: string) {
    super(message);
    this.diagnostic = { line, column, message };
  }
}

export class EvalFailure extends Error {}

const OPERATORS = new Set(["+", "-", "*", "/", "^", "(", ")", ","]);

function isDigit(ch: string): boolean {
  return ch >= "0" && ch <= "9";
}

function isIdentStart(ch: string): boolean {
  return /[A-Za-z_]/.test(ch);
}

function isIdentPart(ch: string): boolean {
  return /[A-Za-z0-9_]/.test(ch);
}

export function tokenize(code: string): Token[] {
  const tokens: Token[] = [];
  let line = 1;
  let col = 1;
  let i = 0;
  while (i < code.length) {
    const ch = code[i];
    if (ch === "\n") {
      line++;
      col = 1;
      i++;
      continue;
    }
    if (ch === " " || ch === "\t" || ch === "\r") {
      i++;
      col++;
      continue;
    }
    const startCol = col;
    if (isDigit(ch)) {
      let j = i;
      while (j < code.length && isDigit(code[j])) j++;
      if (code[j] === "." && isDigit(code[j + 1] ?? "")) {
        j++;
        while (j < code.length && isDigit(code[j])) j++;
      }
      if (code[j] === "e" || code[j] === "E") {
        let k = j + 1;
        if (code[k] === "+" || code[k] === "-") k++;
        if (isDigit(code[k] ?? "")) {
          j = k;
          while (j < code.length && isDigit(code[j])) j++;
        }
      }
      tokens.push({ kind: "number", text: code.slice(i, j), line, column: startCol });
      col += j - i;
      i = j;
      continue;
    }
    if (isIdentStart(ch)) {
      let j = i;
      while (j < code.length && isIdentPart(code[j])) j++;
      tokens.push({ kind: "ident", text: code.slice(i, j), line, column: startCol });
      col += j - i;
      i = j;
      continue;
    }
    if (OPERATORS.has(ch)) {
      tokens.push({ kind: ch, text: ch, line, column: startCol });
      i++;
      col++;
      continue;
    }
    throw new SyntaxFailure(line, startCol, `unexpected character '${ch}'`);
  }
  tokens.push({ kind: "eof", text: "", line, column: col });
  return tokens;
}

// --- parser ------------------------------------------------------------------

export type Node =
  | { kind: "num"; value: number; line: number; column: number }
  | { kind: "name"; ident: string; line: number; column: number }
  | { kind: "unary"; operand: Node; line: number; column: number }
  | { kind: "binop"; op: string; left: Node; right: Node; line: number; column: number }
  | { kind: "call"; func: string; args: Node[]; line: number; column: number };

class Parser {
  pos = 0;
  constructor(private tokens: Token[]) {}

  private get current(): Token {
    return this.tokens[this.pos];
  }

  private advance(): Token {
    return this.tokens[this.pos++];
  }

  private expect(kind: string): Token {
    const tok = this.current;
    if (tok.kind !== kind) {
      const shown = tok.kind === "eof" ? "end of input" : `'${tok.text}'`;
      throw new SyntaxFailure(tok.line, tok.column, `expected '${kind}', found ${shown}`);
    }
    return this.advance();
  }

  private checkDepth(depth: number, tok: Token): void {
    if (depth > MAX_DEPTH) {
      throw new SyntaxFailure(
        tok.line, tok.column, `expression nests deeper than ${MAX_DEPTH} levels`
      );
    }
  }

  parse(): Node {
    const node = this.expr(0);
    const tok = this.current;
    if (tok.kind !== "eof") {
      throw new SyntaxFailure(tok.line, tok.column, `unexpected trailing input '${tok.text}'`);
    }
    return node;
  }

  private expr(depth: number): Node {
    let node = this.term(depth);
    while (this.current.kind === "+" || this.current.kind === "-") {
      const op = this.advance();
      const right = this.term(depth);
      node = { kind: "binop", op: op.kind, left: node, right, line: op.line, column: op.column };
    }
    return node;
  }

  private term(depth: number): Node {
    let node = this.unary(depth);
    while (this.current.kind === "*" || this.current.kind === "/") {
      const op = this.advance();
      const right = this.unary(depth);
      node = { kind: "binop", op: op.kind, left: node, right, line: op.line, column: op.column };
    }
    return node;
  }

  private unary(depth: number): Node {
    const tok = this.current;
    if (tok.kind === "-") {
      this.checkDepth(depth + 1, tok);
      this.advance();
      return { kind: "unary", operand: this.unary(depth + 1), line: tok.line, column: tok.column };
    }
    return this.power(depth);
  }

  private power(depth: number): Node {
    const base = this.primary(depth);
    const tok = this.current;
    if (tok.kind === "^") {
      this.checkDepth(depth + 1, tok);
      this.advance();
      const exponent = this.unary(depth + 1);
      return { kind: "binop", op: "^", left: base, right: exponent, line: tok.line, column: tok.column };
    }
    return base;
  }

  private primary(depth: number): Node {
    const tok = this.current;
    if (tok.kind === "number") {
      this.advance();
      return { kind: "num", value: Number(tok.text), line: tok.line, column: tok.column };
    }
    if (tok.kind === "ident") {
      this.advance();
      if (this.current.kind === "(") {
        this.checkDepth(depth + 1, tok);
        this.advance();
        const args = [this.expr(depth + 1)];
        while (this.current.kind === ",") {
          this.advance();
          args.push(this.expr(depth + 1));
        }
        this.expect(")");
        return { kind: "call", func: tok.text, args, line: tok.line, column: tok.column };
      }
      return { kind: "name", ident: tok.text, line: tok.line, column: tok.column };
    }
    if (tok.kind === "(") {
      this.checkDepth(depth + 1, tok);
      this.advance();
      const node = this.expr(depth + 1);
      this.expect(")");
      return node;
    }
    const shown = tok.kind === "eof" ? "end of input" : `'${tok.text}'`;
    throw new SyntaxFailure(tok.line, tok.column, `expected an expression, found ${shown}`);
  }
}

export function parse(code: string): Node {
  return new Parser(tokenize(code)).parse();
}

// --- static checks -----------------------------------------------------------

function isParam(ident: string): boolean {
  return ident.startsWith(PARAM_PREFIX) && ident.length > PARAM_PREFIX.length;
}

function walk(node: Node, visit: (n: Node) => void): void {
  visit(node);
  if (node.kind === "unary") walk(node.operand, visit);
  else if (node.kind === "binop") {
    walk(node.left, visit);
    walk(node.right, visit);
  } else if (node.kind === "call") node.args.forEach((a) => walk(a, visit));
}

export function staticDiagnostics(tree: Node): Diagnostic[] {
  const found: Diagnostic[] = [];
  walk(tree, (node) => {
    if (node.kind === "name") {
      if (node.ident !== WINDOW_NAME && !isParam(node.ident)) {
        found.push({ line: node.line, column: node.column, message: `unknown identifier ${node.ident}` });
      }
    } else if (node.kind === "call") {
      if (!(node.func in FUNCTIONS)) {
        found.push({ line: node.line, column: node.column, message: `unknown function ${node.func}` });
      } else if (node.args.length !== 1) {
        found.push({
          line: node.line,
          column: node.column,
          message: `${node.func}() expects exactly 1 argument, got ${node.args.length}`,
        });
      }
    }
  });
  found.sort((a, b) => a.line - b.line || a.column - b.column);
  return found;
}

export function referencedParams(tree: Node): string[] {
  const params = new Set<string>();
  walk(tree, (node) => {
    if (node.kind === "name" && isParam(node.ident)) {
      params.add(node.ident.slice(PARAM_PREFIX.length));
    }
  });
  return [...params];
}

// --- evaluator -----------------------------------------------------------------

type Value = number | number[];

export function evaluate(
  tree: Node,
  window: number[],
  params: Record<string, number>,
  stepLimit = STEP_LIMIT
): Value {
  let steps = 0;

  function step(): void {
    steps++;
    if (steps > stepLimit) {
      throw new EvalFailure(`evaluation exceeded the step limit of ${stepLimit}`);
    }
  }

  function requireScalar(value: Value, context: string): number {
    if (Array.isArray(value)) {
      throw new EvalFailure(`the window cannot be used in ${context}`);
    }
    return value;
  }

  function run(node: Node): Value {
    step();
    switch (node.kind) {
      case "num":
        return node.value;
      case "name": {
        if (node.ident === WINDOW_NAME) return window;
        if (isParam(node.ident)) {
          const key = node.ident.slice(PARAM_PREFIX.length);
          if (!(key in params)) throw new EvalFailure(`unbound parameter ${node.ident}`);
          return params[key];
        }
        throw new EvalFailure(`unknown identifier ${node.ident}`);
      }
      case "unary":
        return -requireScalar(run(node.operand), "unary minus");
      case "binop": {
        const a = requireScalar(run(node.left), `operator '${node.op}'`);
        const b = requireScalar(run(node.right), `operator '${node.op}'`);
        switch (node.op) {
          case "+": return a + b;
          case "-": return a - b;
          case "*": return a * b;
          case "/":
            if (b === 0) throw new EvalFailure("division by zero");
            return a / b;
          case "^": {
            const result = Math.pow(a, b);
            if (Number.isNaN(result)) {
              throw new EvalFailure(`math domain error in ${a} ^ ${b}`);
            }
            return result;
          }
        }
        throw new EvalFailure(`unknown operator '${node.op}'`);
      }
      case "call": {
        const fn = FUNCTIONS[node.func];
        if (!fn) throw new EvalFailure(`unknown function ${node.func}`);
        if (node.args.length !== 1) {
          throw new EvalFailure(`${node.func}() expects exactly 1 argument, got ${node.args.length}`);
        }
        const arg = run(node.args[0]);
        if (fn.kind === "window") {
          if (!Array.isArray(arg)) throw new EvalFailure(`${node.func}() expects a window of values`);
          if (arg.length === 0) throw new EvalFailure(`${node.func}() of an empty window`);
          steps += arg.length;
          return fn.apply(arg);
        }
        return fn.apply(requireScalar(arg, `${node.func}()`));
      }
    }
  }

  const result = run(tree);
  if (typeof result === "number" && !Number.isFinite(result)) {
    throw new EvalFailure("result is not finite");
  }
  return result;
}

// --- validateCode: static pass plus dynamic probe --------------------------------

export function validateCode(code: string): Diagnostic[] {
  let tree: Node;
  try {
    tree = parse(code);
  } catch (err) {
    if (err instanceof SyntaxFailure) return [err.diagnostic];
    throw err;
  }
  const diagnostics = staticDiagnostics(tree);
  if (diagnostics.length > 0) return diagnostics;

  const probeParams: Record<string, number> = {};
  for (const key of referencedParams(tree)) probeParams[key] = 1.0;
  try {
    const result = evaluate(tree, PROBE_BATCH, probeParams);
    if (Array.isArray(result)) {
      return [{ line: 1, column: 1, message: "result is not a scalar number" }];
    }
  } catch (err) {
    if (err instanceof EvalFailure) {
      return [{ line: 1, column: 1, message: `dynamic check failed: ${err.message}` }];
    }
    throw err;
  }
  return [];
}
