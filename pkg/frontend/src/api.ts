import { z } from "zod";
import {
  aspectRulesSchema,
  exportSchema,
  finalizeResponseSchema,
  groundTruthResponseSchema,
  multiGtGallerySchema,
  nextReferenceSchema,
  targetGallerySchema,
  tripletResponseSchema,
  voteResponseSchema,
} from "./schemas.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

/** Typed client for the annotation service; every response is validated. */
export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly annotatorId: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  private async request<T>(
    schema: z.ZodType<T>,
    method: "GET" | "POST",
    path: string,
    body?: unknown,
  ): Promise<T> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method,
      headers: {
        "Content-Type": "application/json",
        Authorization: `Bearer ${this.annotatorId}`,
      },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload: unknown = await res.json();
    if (!res.ok) {
      const detail =
        typeof payload === "object" && payload !== null && "detail" in payload
          ? JSON.stringify((payload as { detail: unknown }).detail)
          : res.statusText;
      throw new ApiError(res.status, detail);
    }
    return schema.parse(payload);
  }

  nextReference() {
    return this.request(nextReferenceSchema, "GET", "/next-reference");
  }

  targetGallery(referenceId: string) {
    return this.request(
      targetGallerySchema,
      "GET",
      `/gallery/target/${encodeURIComponent(referenceId)}`,
    );
  }

  submitTriplet(input: {
    reference_id: string;
    target_id: string;
    shared_concept: string;
    relative_caption: string;
    caption_rule_confirmed: boolean;
  }) {
    return this.request(tripletResponseSchema, "POST", "/triplet", input);
  }

  skipReference(referenceId: string) {
    return this.request(
      z.object({
        skipped: z.string(),
        next_reference: z.string().nullable(),
      }),
      "POST",
      "/triplet",
      { action: "skip", reference_id: referenceId },
    );
  }

  multiGtGallery(queryId: string) {
    return this.request(
      multiGtGallerySchema,
      "GET",
      `/gallery/multigt/${encodeURIComponent(queryId)}`,
    );
  }

  submitGroundTruths(queryId: string, version: number, ids: string[]) {
    return this.request(groundTruthResponseSchema, "POST", "/ground-truths", {
      query_id: queryId,
      version,
      ground_truth_ids: ids,
    });
  }

  submitAspectVotes(queryId: string, aspects: string[]) {
    return this.request(voteResponseSchema, "POST", "/aspect-votes", {
      query_id: queryId,
      aspects,
    });
  }

  finalize(queryId: string) {
    return this.request(
      finalizeResponseSchema,
      "POST",
      `/finalize/${encodeURIComponent(queryId)}`,
    );
  }

  exportDataset() {
    return this.request(exportSchema, "GET", "/export");
  }

  aspectRules() {
    return this.request(aspectRulesSchema, "GET", "/aspect-rules");
  }
}
