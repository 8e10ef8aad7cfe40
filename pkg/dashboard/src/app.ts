// DOM wiring for the dashboard panels. Pure logic (grammar, timeline fold,
// request shaping) lives in the sibling modules and is unit-tested; this
// file only renders state and forwards events.

import { GatewayApi, checkDeployForm, DeployForm } from "./api.js";
import { connectStream, StreamHandle } from "./stream.js";
import {
  applyEnvelope,
  AssignmentView,
  emptyView,
  signatureSpans,
  totalDiscarded,
} from "./timeline.js";
import { ClientRow } from "./types.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function signatureColor(signature: string): string {
  if (signature.startsWith("builtin:")) return "hsl(210, 15%, 55%)";
  const hue = parseInt(signature.slice(0, 6), 16) % 360;
  return `hsl(${hue}, 65%, 45%)`;
}

function shortSig(signature: string): string {
  return signature.startsWith("builtin:") ? signature : signature.slice(0, 12);
}

// --- fleet table ---------------------------------------------------------

export function startFleetView(api: GatewayApi, refreshMs = 2000): void {
  const body = el<HTMLTableSectionElement>("fleet-body");

  async function refresh(): Promise<void> {
    try {
      const { clients } = await api.clients();
      body.innerHTML = "";
      for (const row of clients) {
        body.insertAdjacentHTML(
          "beforeend",
          `<tr>
             <td>${row.client_id}</td>
             <td class="${row.connected ? "ok" : "bad"}">${row.connected ? "connected" : "disconnected"}</td>
             <td>${row.address}</td>
           </tr>`
        );
      }
      el("fleet-error").textContent = "";
    } catch (err) {
      el("fleet-error").textContent = `gateway unreachable: ${err}`;
    }
  }

  refresh();
  setInterval(refresh, refreshMs);
}

// --- assignment view ----------------------------------------------------------

const openStreams = new Map<string, StreamHandle>();

export function openAssignmentView(api: GatewayApi, userId: string, assignmentId: string): void {
  const container = el<HTMLDivElement>("views");
  const viewId = `view-${assignmentId}`;
  if (document.getElementById(viewId)) return; // already open

  container.insertAdjacentHTML(
    "afterbegin",
    `<section class="card view" id="${viewId}">
       <h3>${assignmentId} <span class="status" id="${viewId}-status">WAITING</span>
         <button id="${viewId}-close" class="close">close</button></h3>
       <svg id="${viewId}-chart" viewBox="0 0 600 120" preserveAspectRatio="none"></svg>
       <div class="strip" id="${viewId}-strip" title="accepted signature per iteration"></div>
       <div class="meta" id="${viewId}-meta"></div>
       <ul class="notices" id="${viewId}-notices"></ul>
     </section>`
  );

  let view = emptyView(assignmentId);
  const url = api.streamUrl(userId, assignmentId, location.origin);
  const handle = connectStream(url, {
    onEnvelope(envelope) {
      view = applyEnvelope(view, envelope);
      render(view);
      if (view.terminal) handle.close();
    },
  });
  openStreams.set(assignmentId, handle);

  el(`${viewId}-close`).onclick = () => {
    handle.close();
    openStreams.delete(assignmentId);
    document.getElementById(viewId)?.remove();
  };

  function render(v: AssignmentView): void {
    const status = el(`${viewId}-status`);
    status.textContent = v.status;
    status.className = `status s-${v.status.toLowerCase()}`;

    const values = v.outputs.map((o) => o.value);
    if (values.length > 0) {
      const lo = Math.min(...values);
      const hi = Math.max(...values);
      const span = hi - lo || 1;
      const step = 600 / Math.max(values.length - 1, 1);
      const points = values
        .map((val, i) => `${(i * step).toFixed(1)},${(110 - ((val - lo) / span) * 100).toFixed(1)}`)
        .join(" ");
      el(`${viewId}-chart`).innerHTML =
        `<polyline fill="none" stroke="#2a6fb0" stroke-width="2" points="${points}"/>`;
    }

    const spans = signatureSpans(v);
    const total = v.outputs.length || 1;
    el(`${viewId}-strip`).innerHTML = spans
      .map((s) => {
        const width = ((s.to - s.from + 1) / total) * 100;
        return `<div class="span" style="width:${width}%;background:${signatureColor(s.signature)}"
                     title="${s.signature} (iterations ${s.from}-${s.to})">${shortSig(s.signature)}</div>`;
      })
      .join("");

    const last = v.outputs[v.outputs.length - 1];
    el(`${viewId}-meta`).textContent = last
      ? `${v.outputs.length} outputs, latest value ${last.value.toFixed(6)}, ` +
        `discarded so far ${totalDiscarded(v)}`
      : "no outputs yet";

    el(`${viewId}-notices`).innerHTML = v.notices.map((n) => `<li>${n}</li>`).join("");
  }
}

// --- deploy panel -----------------------------------------------------------------

export function wireDeployPanel(api: GatewayApi): void {
  const result = el("deploy-result");
  el<HTMLButtonElement>("deploy-go").onclick = async () => {
    const form: DeployForm = {
      user_id: el<HTMLInputElement>("deploy-user").value.trim(),
      name: el<HTMLInputElement>("deploy-name").value.trim(),
      code: el<HTMLTextAreaElement>("deploy-code").value,
      target: el<HTMLSelectElement>("deploy-target").value as DeployForm["target"],
    };
    const check = checkDeployForm(form);
    if (!check.ok) {
      result.innerHTML = check.diagnostics
        .map((d) => `<div class="bad">${d.line}:${d.column}: ${d.message}</div>`)
        .join("");
      return; // fail-local: nothing was sent
    }
    result.textContent = "deploying...";
    try {
      const status = await api.deploy(form);
      result.innerHTML = `<div class="${status.state === "DEPLOYED" ? "ok" : "bad"}">
        ${status.state}: ${status.detail}</div>`;
    } catch (err) {
      result.innerHTML = `<div class="bad">${err}</div>`;
    }
  };
}

// --- submit panel ------------------------------------------------------------------

export function wireSubmitPanel(api: GatewayApi): void {
  const result = el("submit-result");
  el<HTMLButtonElement>("submit-go").onclick = async () => {
    const userId = el<HTMLInputElement>("submit-user").value.trim();
    const method = el<HTMLSelectElement>("submit-method").value;
    const iterationsRaw = el<HTMLInputElement>("submit-iterations").value.trim();
    const form = {
      user_id: userId,
      method,
      custom_module:
        method === "CUSTOM" ? el<HTMLInputElement>("submit-module").value.trim() : undefined,
      iterations: iterationsRaw === "INDEFINITE" ? ("INDEFINITE" as const) : Number(iterationsRaw),
      window_size: Number(el<HTMLInputElement>("submit-window").value),
    };
    result.textContent = "submitting...";
    try {
      const { assignment_id } = await api.submit(form);
      result.innerHTML = `<div class="ok">accepted: ${assignment_id}</div>`;
      openAssignmentView(api, userId, assignment_id);
    } catch (err) {
      result.innerHTML = `<div class="bad">${err}</div>`;
    }
  };
}

export function wireWatchPanel(api: GatewayApi): void {
  el<HTMLButtonElement>("watch-go").onclick = () => {
    const userId = el<HTMLInputElement>("watch-user").value.trim();
    const assignmentId = el<HTMLInputElement>("watch-id").value.trim();
    if (userId && assignmentId) openAssignmentView(api, userId, assignmentId);
  };
}
