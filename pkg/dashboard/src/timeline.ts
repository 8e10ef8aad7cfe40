// Pure fold of the gateway's envelope stream into an assignment view.
// The rendered timeline is exactly the ITERATION_OUTPUT stream: no
// client-side recomputation of the majority filter ever happens here.

import { Envelope, IterationOutput, StatusRecord, TERMINAL_STATES } from "./types.js";

export interface AssignmentView {
  assignmentId: string;
  outputs: IterationOutput[]; // ordered by iteration, deduplicated
  status: string;
  statusDetail: string;
  notices: string[]; // discarded iterations, client errors
  terminal: boolean;
}

export function emptyView(assignmentId: string): AssignmentView {
  return {
    assignmentId,
    outputs: [],
    status: "WAITING",
    statusDetail: "",
    notices: [],
    terminal: false,
  };
}

export function applyEnvelope(view: AssignmentView, envelope: Envelope): AssignmentView {
  const payload = envelope.payload;
  if (payload && payload.assignment_id && payload.assignment_id !== view.assignmentId) {
    return view; // a different assignment on the same user stream
  }
  if (envelope.msg_type === "ITERATION_OUTPUT") {
    const output = payload as IterationOutput;
    if (!view.outputs.some((o) => o.iteration === output.iteration)) {
      view.outputs.push(output);
      view.outputs.sort((a, b) => a.iteration - b.iteration);
    }
  } else if (envelope.msg_type === "ASSIGNMENT_STATUS") {
    const status = payload as StatusRecord;
    if (status.state === "ITERATION_DISCARDED") {
      if (!view.notices.includes(status.detail)) view.notices.push(status.detail);
    } else {
      view.status = status.state;
      view.statusDetail = status.detail;
      if (TERMINAL_STATES.has(status.state)) view.terminal = true;
    }
  } else if (envelope.msg_type === "ERROR") {
    const notice = `error: ${payload.message}`;
    if (!view.notices.includes(notice)) view.notices.push(notice);
  }
  return view;
}

/** (iteration, signature, value) rows, exactly what `fleet watch` prints. */
export function triples(view: AssignmentView): Array<[number, string, string]> {
  return view.outputs.map((o) => [o.iteration, o.accepted_signature, o.value.toFixed(6)]);
}

export interface SignatureSpan {
  signature: string;
  from: number; // first iteration of the span
  to: number; // last iteration of the span
}

/** Consecutive runs of the accepted signature: the version timeline. */
export function signatureSpans(view: AssignmentView): SignatureSpan[] {
  const spans: SignatureSpan[] = [];
  for (const output of view.outputs) {
    const last = spans[spans.length - 1];
    if (last && last.signature === output.accepted_signature) {
      last.to = output.iteration;
    } else {
      spans.push({
        signature: output.accepted_signature,
        from: output.iteration,
        to: output.iteration,
      });
    }
  }
  return spans;
}

/** Iterations where the accepted signature changed from the previous one. */
export function signatureFlips(view: AssignmentView): Array<{ iteration: number; from: string; to: string }> {
  const flips = [];
  for (let i = 1; i < view.outputs.length; i++) {
    const prev = view.outputs[i - 1];
    const cur = view.outputs[i];
    if (prev.accepted_signature !== cur.accepted_signature) {
      flips.push({
        iteration: cur.iteration,
        from: prev.accepted_signature,
        to: cur.accepted_signature,
      });
    }
  }
  return flips;
}

export function totalDiscarded(view: AssignmentView): number {
  return view.outputs.reduce((acc, o) => acc + o.discarded_count, 0);
}
