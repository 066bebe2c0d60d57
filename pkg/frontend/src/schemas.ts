import { z } from "zod";

/** The nine caption categories the service exposes via /aspect-rules. */
export const SEMANTIC_ASPECTS = [
  "cardinality",
  "addition",
  "negation",
  "direct_addressing",
  "compare_change",
  "comparative_statement",
  "statement_conjunction",
  "spatial_background",
  "viewpoint",
] as const;

export type SemanticAspect = (typeof SEMANTIC_ASPECTS)[number];

export const semanticAspectSchema = z.enum(SEMANTIC_ASPECTS);

export const galleryCandidateSchema = z.object({
  image_id: z.string().min(1),
  similarity: z.number(),
  provenance: z.array(z.enum(["visual_similarity", "model_retrieval"])),
  known_gt: z.boolean(),
});
export type GalleryCandidate = z.infer<typeof galleryCandidateSchema>;

export const nextReferenceSchema = z.object({
  reference_id: z.string().nullable(),
  done: z.boolean(),
  supercategory: z.string().optional(),
});

export const targetGallerySchema = z.object({
  candidates: z.array(galleryCandidateSchema),
  truncated: z.boolean(),
  caption_prefix: z.string().min(1),
});

export const tripletResponseSchema = z.object({
  query_id: z.string().min(1),
  version: z.number().int().nonnegative(),
});

export const multiGtGallerySchema = z.object({
  candidates: z.array(galleryCandidateSchema),
  version: z.number().int().nonnegative(),
  known_target: z.string().min(1),
});

export const groundTruthResponseSchema = z.object({
  query_id: z.string(),
  version: z.number().int(),
  ground_truth_count: z.number().int().positive(),
});

export const voteResponseSchema = z.object({
  query_id: z.string(),
  version: z.number().int(),
  voters: z.array(z.string()),
});

export const finalizeResponseSchema = z.object({
  query_id: z.string(),
  aspects: z.array(semanticAspectSchema),
  version: z.number().int(),
});

export const aspectRulesSchema = z.object({
  aspects: z.array(semanticAspectSchema).length(9),
});

/** One exported annotation record; mirrors the dataset interchange schema. */
export const exportedQuerySchema = z
  .object({
    query_id: z.string().min(1),
    reference_id: z.string().min(1),
    relative_caption: z.string().min(1),
    target_id: z.string().min(1),
    ground_truth_ids: z.array(z.string().min(1)).min(1),
    shared_concept: z.string().min(1).nullable(),
    semantic_aspects: z.array(semanticAspectSchema),
  })
  .refine((q) => q.reference_id !== q.target_id, {
    message: "reference and target must differ",
  })
  .refine((q) => q.ground_truth_ids.includes(q.target_id), {
    message: "target must be among the ground truths",
  });

export const exportSchema = z.object({
  queries: z.array(exportedQuerySchema),
});
export type ExportedDataset = z.infer<typeof exportSchema>;
