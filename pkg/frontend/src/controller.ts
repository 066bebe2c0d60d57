import { ApiClient } from "./api.js";
import type { ExportedDataset, GalleryCandidate } from "./schemas.js";

export type Phase =
  | "idle"
  | "pick_target"
  | "write_caption"
  | "mark_ground_truths"
  | "vote_aspects"
  | "done";

export interface WorkbenchState {
  phase: Phase;
  referenceId: string | null;
  supercategory: string | null;
  targetGallery: GalleryCandidate[];
  galleryTruncated: boolean;
  captionPrefix: string;
  selectedTarget: string | null;
  sharedConcept: string;
  captionSuffix: string;
  queryId: string | null;
  version: number;
  multiGtGallery: GalleryCandidate[];
  selectedGroundTruths: Set<string>;
  aspectChoices: Set<string>;
  finalAspects: string[];
  error: string | null;
}

function initialState(): WorkbenchState {
  return {
    phase: "idle",
    referenceId: null,
    supercategory: null,
    targetGallery: [],
    galleryTruncated: false,
    captionPrefix: "",
    selectedTarget: null,
    sharedConcept: "",
    captionSuffix: "",
    queryId: null,
    version: 0,
    multiGtGallery: [],
    selectedGroundTruths: new Set(),
    aspectChoices: new Set(),
    finalAspects: [],
    error: null,
  };
}

/**
 * Drives a single annotator through the three phases:
 * triplet creation, ground-truth marking, and aspect voting.
 *
 * The caption prefix is locked: annotators only write the continuation, and
 * the full caption is "<prefix with shared concept> <suffix>".
 */
export class WorkbenchController {
  state: WorkbenchState = initialState();
  private listeners: Array<(s: WorkbenchState) => void> = [];

  constructor(private readonly api: ApiClient) {}

  onChange(fn: (s: WorkbenchState) => void) {
    this.listeners.push(fn);
  }

  private emit() {
    for (const fn of this.listeners) fn(this.state);
  }

  /** The caption sent to the service: locked prefix plus the free suffix. */
  fullCaption(): string {
    const prefix = this.state.captionPrefix.replace(
      "{shared_concept}",
      this.state.sharedConcept,
    );
    return `${prefix} ${this.state.captionSuffix}`.trim();
  }

  async loadNextReference(): Promise<void> {
    const next = await this.api.nextReference();
    if (next.done || next.reference_id === null) {
      this.state = { ...initialState(), phase: "done" };
      this.emit();
      return;
    }
    const gallery = await this.api.targetGallery(next.reference_id);
    this.state = {
      ...initialState(),
      phase: "pick_target",
      referenceId: next.reference_id,
      supercategory: next.supercategory ?? null,
      targetGallery: gallery.candidates,
      galleryTruncated: gallery.truncated,
      captionPrefix: gallery.caption_prefix,
    };
    this.emit();
  }

  async skipReference(): Promise<void> {
    if (!this.state.referenceId) throw new Error("no reference loaded");
    await this.api.skipReference(this.state.referenceId);
    await this.loadNextReference();
  }

  pickTarget(imageId: string) {
    if (this.state.phase !== "pick_target") {
      throw new Error(`cannot pick a target in phase ${this.state.phase}`);
    }
    if (!this.state.targetGallery.some((c) => c.image_id === imageId)) {
      throw new Error(`image ${imageId} is not in the gallery`);
    }
    this.state = { ...this.state, selectedTarget: imageId, phase: "write_caption" };
    this.emit();
  }

  async submitTriplet(sharedConcept: string, captionSuffix: string): Promise<void> {
    const target = this.state.selectedTarget;
    const reference = this.state.referenceId;
    if (this.state.phase !== "write_caption" || !target || !reference) {
      throw new Error(`cannot submit a triplet in phase ${this.state.phase}`);
    }
    if (!sharedConcept.trim()) throw new Error("shared concept is required");
    if (!captionSuffix.trim()) throw new Error("caption continuation is required");
    this.state = { ...this.state, sharedConcept, captionSuffix };
    const res = await this.api.submitTriplet({
      reference_id: reference,
      target_id: target,
      shared_concept: sharedConcept,
      relative_caption: this.fullCaption(),
      caption_rule_confirmed: true,
    });
    const gallery = await this.api.multiGtGallery(res.query_id);
    this.state = {
      ...this.state,
      phase: "mark_ground_truths",
      queryId: res.query_id,
      version: gallery.version,
      multiGtGallery: gallery.candidates,
      selectedGroundTruths: new Set([target]),
    };
    this.emit();
  }

  toggleGroundTruth(imageId: string) {
    if (this.state.phase !== "mark_ground_truths") {
      throw new Error(`cannot mark ground truths in phase ${this.state.phase}`);
    }
    if (imageId === this.state.selectedTarget) return; // target stays marked
    const next = new Set(this.state.selectedGroundTruths);
    if (next.has(imageId)) next.delete(imageId);
    else next.add(imageId);
    this.state = { ...this.state, selectedGroundTruths: next };
    this.emit();
  }

  async submitGroundTruths(): Promise<void> {
    if (this.state.phase !== "mark_ground_truths" || !this.state.queryId) {
      throw new Error(`cannot submit ground truths in phase ${this.state.phase}`);
    }
    const res = await this.api.submitGroundTruths(
      this.state.queryId,
      this.state.version,
      [...this.state.selectedGroundTruths],
    );
    this.state = { ...this.state, phase: "vote_aspects", version: res.version };
    this.emit();
  }

  toggleAspect(aspect: string) {
    if (this.state.phase !== "vote_aspects") {
      throw new Error(`cannot vote in phase ${this.state.phase}`);
    }
    const next = new Set(this.state.aspectChoices);
    if (next.has(aspect)) next.delete(aspect);
    else next.add(aspect);
    this.state = { ...this.state, aspectChoices: next };
    this.emit();
  }

  async submitAspectVotes(): Promise<void> {
    if (this.state.phase !== "vote_aspects" || !this.state.queryId) {
      throw new Error(`cannot submit votes in phase ${this.state.phase}`);
    }
    await this.api.submitAspectVotes(this.state.queryId, [
      ...this.state.aspectChoices,
    ]);
    this.emit();
  }

  async finalize(): Promise<string[]> {
    if (!this.state.queryId) throw new Error("no active query");
    const res = await this.api.finalize(this.state.queryId);
    this.state = { ...this.state, finalAspects: res.aspects };
    this.emit();
    return res.aspects;
  }

  exportDataset(): Promise<ExportedDataset> {
    return this.api.exportDataset();
  }
}
