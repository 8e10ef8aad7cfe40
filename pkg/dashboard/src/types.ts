// Wire shapes, matching the gateway's JSON field names exactly.

export interface Envelope {
  msg_type: string;
  sender_id: string;
  seq: number;
  payload: any;
}

export interface IterationOutput {
  assignment_id: string;
  iteration: number;
  accepted_signature: string;
  accepted_count: number;
  discarded_count: number;
  value: number;
  offboard_signature?: string;
}

export interface StatusRecord {
  state: string;
  detail: string;
  assignment_id?: string;
  deployment_id?: string;
}

export interface ErrorInfo {
  code: string;
  message: string;
  assignment_id?: string;
  client_id?: string;
  iteration?: number;
  module?: string;
}

export interface ClientRow {
  client_id: string;
  address: string;
  connected: boolean;
  last_heartbeat: number;
}

export const TERMINAL_STATES = new Set(["COMPLETED", "CANCELLED", "FAILED"]);
