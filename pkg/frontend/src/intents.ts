/**
 * Web-intents style shim over the gateway's JSON endpoints.
 *
 * The page registers an action, starts an activity, and receives the
 * result through a single onActivity consumer:
 *
 *   const intents = createIntents({ gateway: "http://127.0.0.1:8225" });
 *   intents.register("http://webintents.org/m2m", undefined);
 *   intents.onActivity((r) => render(r.data));
 *   intents.startActivity("http://webintents.org/m2m", { entityId: "ot1" });
 *
 * A handler is either an in-page function or a gateway base URL; an
 * undefined handler falls back to the gateway the shim was created
 * with.  The gateway flow fetches the latest measurement element for
 * the requesting entity and hands the page its parsed JSON plus the
 * raw body (the bytes the server's digest is computed over).
 *
 * Everything is JSON end to end: requests carry Accept:
 * application/json and any response that is not JSON is rejected
 * before it can reach the callback.
 */

export class InvalidAction extends Error {}

export class NoHandler extends Error {}

export class GatewayError extends Error {
  readonly status: number;

  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

export type ActivityParams = Record<string, unknown>;

export type InPageHandler = (
  params: ActivityParams,
) => unknown | Promise<unknown>;

export interface IntentRegistration {
  readonly action: string;
  readonly handler: string | InPageHandler | undefined;
}

/** The intent-object argument shape: an action plus optional params. */
export interface Intent {
  action: string;
  params?: ActivityParams;
}

export interface ActivityResult {
  action: string;
  params: ActivityParams;
  /** Parsed JSON payload (for the gateway flow, the element). */
  data: unknown;
  /** Raw response text; sha256 over these bytes is the element digest. */
  body: string;
  /** Element id when the gateway flow produced the payload. */
  elementId?: string;
}

export type ActivityConsumer = (result: ActivityResult) => void;

export interface IntentsOptions {
  /** Default gateway base URL for registrations with no handler. */
  gateway?: string;
  /** Fetch implementation; defaults to the ambient one. */
  fetch?: typeof fetch;
}

export interface Intents {
  register(
    action: string,
    handler?: string | InPageHandler,
  ): IntentRegistration;
  startActivity(
    intent: string | Intent,
    params?: ActivityParams,
  ): Promise<void>;
  onActivity(consumer: ActivityConsumer): void;
  /** Patch register/startActivity/onActivity onto a navigator-like
   * object; returns the undo. Opt-in, nothing is patched by default. */
  install(target: object): () => void;
}

const JSON_HEADERS = { Accept: "application/json" };

function isJsonResponse(response: Response): boolean {
  const type = response.headers.get("content-type") ?? "";
  return type.includes("json");
}

async function fetchJson(
  doFetch: typeof fetch,
  url: string,
): Promise<{ data: unknown; body: string }> {
  let response: Response;
  try {
    response = await doFetch(url, { headers: JSON_HEADERS });
  } catch (err) {
    throw new GatewayError(0, `gateway unreachable: ${String(err)}`);
  }
  const body = await response.text();
  if (!response.ok) {
    throw new GatewayError(response.status, `${url} -> ${response.status}`);
  }
  if (!isJsonResponse(response)) {
    throw new GatewayError(
      response.status,
      `expected JSON from ${url}, got ${response.headers.get("content-type")}`,
    );
  }
  return { data: JSON.parse(body), body };
}

interface EventEnvelope {
  seq: number;
  element: {
    elementId: string;
    entityId?: string;
    entityType?: string;
  };
}

/** Latest measurement element for the entity (or any entity when none
 * is named).  Management records under m2m: types are not data. */
function latestMeasurement(
  events: EventEnvelope[],
  entityId: string | undefined,
): EventEnvelope | undefined {
  let best: EventEnvelope | undefined;
  for (const event of events) {
    const element = event.element;
    if (!element || typeof element.entityId !== "string") continue;
    if (element.entityType && element.entityType.startsWith("m2m:")) continue;
    if (entityId !== undefined && element.entityId !== entityId) continue;
    if (!best || event.seq > best.seq) best = event;
  }
  return best;
}

class IntentsImpl implements Intents {
  private registry = new Map<string, string | InPageHandler | undefined>();
  private consumer: ActivityConsumer | null = null;
  private backlog: ActivityResult[] = [];
  private tail: Promise<void> = Promise.resolve();
  private readonly gateway?: string;
  private readonly doFetch: typeof fetch;

  constructor(options: IntentsOptions) {
    this.gateway = options.gateway;
    // bind so the implementation works detached from window
    this.doFetch = options.fetch ?? fetch.bind(globalThis);
  }

  register(
    action: string,
    handler?: string | InPageHandler,
  ): IntentRegistration {
    if (typeof action !== "string" || action.length === 0) {
      throw new InvalidAction("action must be a non-empty URI string");
    }
    this.registry.set(action, handler); // last write wins
    return { action, handler };
  }

  startActivity(
    intent: string | Intent,
    params?: ActivityParams,
  ): Promise<void> {
    const action = typeof intent === "string" ? intent : intent.action;
    const merged =
      typeof intent === "string" ? (params ?? {}) : (intent.params ?? {});
    if (!this.registry.has(action)) {
      return Promise.reject(new NoHandler(`no handler for ${action}`));
    }
    const handler = this.registry.get(action);

    // One delivery slot per activity, claimed in start order; the chain
    // keeps callbacks sequential even when fetches overlap.
    const link = this.tail.then(async () => {
      const result = await this.run(action, handler, merged);
      this.deliver(result);
    });
    this.tail = link.catch(() => undefined);
    return link;
  }

  onActivity(consumer: ActivityConsumer): void {
    this.consumer = consumer;
    const pending = this.backlog;
    this.backlog = [];
    for (const result of pending) consumer(result);
  }

  install(target: object): () => void {
    const nav = target as Record<string, unknown>;
    const saved = {
      register: nav.register,
      startActivity: nav.startActivity,
      onActivity: Object.getOwnPropertyDescriptor(target, "onActivity"),
    };
    nav.register = (action: string, handler?: string | InPageHandler) =>
      this.register(action, handler);
    nav.startActivity = (intent: string | Intent, params?: ActivityParams) =>
      this.startActivity(intent, params);
    Object.defineProperty(target, "onActivity", {
      configurable: true,
      set: (consumer: ActivityConsumer) => this.onActivity(consumer),
    });
    return () => {
      nav.register = saved.register;
      nav.startActivity = saved.startActivity;
      if (saved.onActivity) {
        Object.defineProperty(target, "onActivity", saved.onActivity);
      } else {
        delete nav.onActivity;
      }
    };
  }

  private async run(
    action: string,
    handler: string | InPageHandler | undefined,
    params: ActivityParams,
  ): Promise<ActivityResult> {
    if (typeof handler === "function") {
      const data = await handler(params);
      return { action, params, data, body: JSON.stringify(data) };
    }
    const base = handler ?? this.gateway;
    if (!base) {
      throw new NoHandler(`${action} has no handler and no default gateway`);
    }
    return this.fetchLatest(action, base.replace(/\/$/, ""), params);
  }

  private async fetchLatest(
    action: string,
    base: string,
    params: ActivityParams,
  ): Promise<ActivityResult> {
    const feed = await fetchJson(this.doFetch, `${base}/events?since=0`);
    const events = (feed.data as { events: EventEnvelope[] }).events ?? [];
    const entityId =
      typeof params.entityId === "string" ? params.entityId : undefined;
    const hit = latestMeasurement(events, entityId);
    if (!hit) {
      throw new GatewayError(
        404,
        `no measurements${entityId ? ` for ${entityId}` : ""}`,
      );
    }
    const element = await fetchJson(
      this.doFetch,
      `${base}/elements/${hit.element.elementId}`,
    );
    return {
      action,
      params,
      data: element.data,
      body: element.body,
      elementId: hit.element.elementId,
    };
  }

  private deliver(result: ActivityResult): void {
    if (this.consumer) {
      this.consumer(result);
    } else {
      this.backlog.push(result);
    }
  }
}

export function createIntents(options: IntentsOptions = {}): Intents {
  return new IntentsImpl(options);
}

/** Hex SHA-256 of a string's UTF-8 bytes; matches the gateway's
 * element digest when fed the canonical JSON body verbatim. */
export async function sha256Hex(text: string): Promise<string> {
  const bytes = new TextEncoder().encode(text);
  const digest = await crypto.subtle.digest("SHA-256", bytes);
  return Array.from(new Uint8Array(digest))
    .map((b) => b.toString(16).padStart(2, "0"))
    .join("");
}
