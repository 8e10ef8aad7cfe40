// Thin REST client for the gateway. Everything the dashboard mutates goes
// through the same endpoints the CLI uses.

import { ClientRow, StatusRecord } from "./types.js";
import { validateCode, Diagnostic } from "./grammar.js";

export class GatewayError extends Error {
  constructor(message: string, public status: number) {
    super(message);
  }
}

type FetchLike = (url: string, init?: any) => Promise<{
  ok: boolean;
  status: number;
  json(): Promise<any>;
}>;

export interface AssignmentForm {
  user_id: string;
  method: string;
  custom_module?: string;
  target_clients?: string[];
  iterations: number | "INDEFINITE";
  window_size: number;
  params?: Record<string, number>;
}

export interface DeployForm {
  user_id: string;
  name: string;
  code: string;
  target: "CLOUD" | "CLIENTS" | "BOTH";
  target_clients?: string[];
}

export class GatewayApi {
  constructor(private base = "", private fetchImpl: FetchLike = fetch.bind(globalThis)) {}

  private async request(method: string, path: string, body?: unknown): Promise<any> {
    const init: any = { method, headers: { "content-type": "application/json" } };
    if (body !== undefined) init.body = JSON.stringify(body);
    const response = await this.fetchImpl(this.base + path, init);
    const data = await response.json().catch(() => ({}));
    if (!response.ok) {
      const message = data?.error?.message ?? `gateway returned ${response.status}`;
      throw new GatewayError(message, response.status);
    }
    return data;
  }

  clients(): Promise<{ clients: ClientRow[] }> {
    return this.request("GET", "/clients");
  }

  submit(form: AssignmentForm): Promise<{ assignment_id: string }> {
    return this.request("POST", "/assignments", {
      target_clients: [],
      params: {},
      ...form,
    });
  }

  /** Panel deployments carry no signature; the gateway computes it from
   * the same canonical bytes it verifies. */
  deploy(form: DeployForm): Promise<StatusRecord> {
    return this.request("POST", "/modules", {
      user_id: form.user_id,
      target: form.target,
      target_clients: form.target_clients ?? [],
      module: {
        user_id: form.user_id,
        name: form.name,
        code: form.code,
      },
    });
  }

  assignment(assignmentId: string): Promise<any> {
    return this.request("GET", `/assignments/${assignmentId}`);
  }

  cancel(assignmentId: string): Promise<StatusRecord> {
    return this.request("POST", `/assignments/${assignmentId}/cancel`);
  }

  streamUrl(userId: string, assignmentId?: string, locationOrigin?: string): string {
    const origin = this.base || locationOrigin || "";
    const ws = origin.replace(/^http/, "ws");
    const suffix = assignmentId ? `&assignment_id=${encodeURIComponent(assignmentId)}` : "";
    return `${ws}/stream?user_id=${encodeURIComponent(userId)}${suffix}`;
  }
}

export interface DeployCheck {
  ok: boolean;
  diagnostics: Diagnostic[];
}

/** Fail-local guard for the deploy panel: invalid code sends no request. */
export function checkDeployForm(form: DeployForm): DeployCheck {
  const diagnostics = validateCode(form.code);
  if (!form.name.match(/^[a-z0-9_]{1,64}$/)) {
    diagnostics.push({
      line: 1,
      column: 1,
      message: `module name must match [a-z0-9_]{1,64}, got '${form.name}'`,
    });
  }
  if (!form.user_id) {
    diagnostics.push({ line: 1, column: 1, message: "user id is required" });
  }
  return { ok: diagnostics.length === 0, diagnostics };
}
