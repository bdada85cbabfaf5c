/** Thin client for the study service endpoints. Works in the browser and
 * under node 20 (global fetch). */

import { AnnotationPayload } from "./state.js";

export interface NextItemResponse {
  done: boolean;
  item_id: string | null;
  image: string | null; // base64 PNG
}

export interface ProgressResponse {
  done: number;
  total: number;
}

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`${status}: ${detail}`);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let detail = response.statusText;
  try {
    const body = await response.json();
    if (body && body.detail) detail = JSON.stringify(body.detail);
  } catch {
    // non-JSON error body: keep the status text
  }
  return new ApiError(response.status, detail);
}

export class StudyClient {
  constructor(private baseUrl: string, private token: string) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private headers(extra: Record<string, string> = {}): Record<string, string> {
    return { "X-Session-Token": this.token, ...extra };
  }

  async next(): Promise<NextItemResponse> {
    const r = await fetch(`${this.baseUrl}/api/session/next`,
                          { headers: this.headers() });
    if (!r.ok) throw await parseError(r);
    return r.json();
  }

  async submit(payload: AnnotationPayload): Promise<void> {
    const r = await fetch(`${this.baseUrl}/api/session/annotation`, {
      method: "POST",
      headers: this.headers({ "Content-Type": "application/json" }),
      body: JSON.stringify(payload),
    });
    if (!r.ok) throw await parseError(r);
  }

  async progress(): Promise<ProgressResponse> {
    const r = await fetch(`${this.baseUrl}/api/session/progress`,
                          { headers: this.headers() });
    if (!r.ok) throw await parseError(r);
    return r.json();
  }
}
