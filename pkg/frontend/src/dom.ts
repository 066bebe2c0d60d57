import { SEMANTIC_ASPECTS } from "./schemas.js";
import type { WorkbenchController, WorkbenchState } from "./controller.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function button(label: string, onClick: () => void): HTMLButtonElement {
  const b = el("button", "wb-button", label);
  b.addEventListener("click", onClick);
  return b;
}

/** Renders the controller state into `root` and wires user events back. */
export function mountWorkbench(
  root: HTMLElement,
  controller: WorkbenchController,
  imageUrl: (imageId: string) => string,
): void {
  controller.onChange((state) => render(root, controller, state, imageUrl));
  void controller.loadNextReference();
}

function render(
  root: HTMLElement,
  c: WorkbenchController,
  s: WorkbenchState,
  imageUrl: (imageId: string) => string,
): void {
  root.replaceChildren();
  const header = el("header", "wb-header");
  header.append(el("h1", undefined, "Annotation workbench"));
  header.append(el("span", "wb-phase", `phase: ${s.phase}`));
  if (s.error) header.append(el("p", "wb-error", s.error));
  root.append(header);

  switch (s.phase) {
    case "done":
      root.append(el("p", undefined, "No references left. Thank you!"));
      root.append(
        button("Download dataset", () => {
          void c.exportDataset().then((data) => {
            const blob = new Blob([JSON.stringify(data, null, 2)], {
              type: "application/json",
            });
            const a = el("a");
            a.href = URL.createObjectURL(blob);
            a.download = "annotations.json";
            a.click();
          });
        }),
      );
      return;
    case "pick_target":
      renderTargetGallery(root, c, s, imageUrl);
      return;
    case "write_caption":
      renderCaptionForm(root, c, s, imageUrl);
      return;
    case "mark_ground_truths":
      renderMultiGt(root, c, s, imageUrl);
      return;
    case "vote_aspects":
      renderAspects(root, c, s);
      return;
    default:
      root.append(el("p", undefined, "Loading…"));
  }
}

function candidateCard(
  imageId: string,
  sub: string,
  imageUrl: (id: string) => string,
  selected: boolean,
  onClick: () => void,
): HTMLElement {
  const card = el("figure", selected ? "wb-card wb-selected" : "wb-card");
  const img = el("img");
  img.src = imageUrl(imageId);
  img.alt = imageId;
  card.append(img, el("figcaption", undefined, `${imageId} ${sub}`.trim()));
  card.addEventListener("click", onClick);
  return card;
}

function renderTargetGallery(
  root: HTMLElement,
  c: WorkbenchController,
  s: WorkbenchState,
  imageUrl: (id: string) => string,
): void {
  root.append(
    el(
      "p",
      undefined,
      `Reference ${s.referenceId} (${s.supercategory ?? "uncategorized"}): ` +
        "pick a target sharing a concept with it, or skip.",
    ),
  );
  if (s.galleryTruncated) {
    root.append(el("p", "wb-notice", "Fewer candidates than usual remain."));
  }
  const grid = el("div", "wb-grid");
  for (const cand of s.targetGallery) {
    grid.append(
      candidateCard(cand.image_id, cand.similarity.toFixed(2), imageUrl, false, () =>
        c.pickTarget(cand.image_id),
      ),
    );
  }
  root.append(grid, button("Skip reference", () => void c.skipReference()));
}

function renderCaptionForm(
  root: HTMLElement,
  c: WorkbenchController,
  s: WorkbenchState,
  imageUrl: (id: string) => string,
): void {
  const pair = el("div", "wb-grid");
  pair.append(
    candidateCard(s.referenceId!, "(reference)", imageUrl, false, () => {}),
    candidateCard(s.selectedTarget!, "(target)", imageUrl, true, () => {}),
  );
  root.append(pair);

  const concept = el("input", "wb-input");
  concept.placeholder = "shared concept (e.g. dog)";
  const suffix = el("input", "wb-input");
  suffix.placeholder = "caption continuation";
  const preview = el("p", "wb-preview");
  const update = () => {
    preview.textContent = s.captionPrefix.replace(
      "{shared_concept}",
      concept.value || "…",
    ) + ` ${suffix.value}`;
  };
  concept.addEventListener("input", update);
  suffix.addEventListener("input", update);
  update();
  root.append(
    el("p", undefined, "The caption prefix is fixed; write only the continuation."),
    concept,
    suffix,
    preview,
    button("Submit triplet", () => void c.submitTriplet(concept.value, suffix.value)),
  );
}

function renderMultiGt(
  root: HTMLElement,
  c: WorkbenchController,
  s: WorkbenchState,
  imageUrl: (id: string) => string,
): void {
  root.append(
    el(
      "p",
      undefined,
      "Select every image that also satisfies the query. " +
        "Badges show why each candidate was suggested.",
    ),
  );
  const grid = el("div", "wb-grid");
  for (const cand of s.multiGtGallery) {
    const badges = cand.provenance
      .map((p) => (p === "model_retrieval" ? "model" : "similar"))
      .join("+");
    const card = candidateCard(
      cand.image_id,
      `[${badges}]${cand.known_gt ? " [target]" : ""}`,
      imageUrl,
      s.selectedGroundTruths.has(cand.image_id),
      () => c.toggleGroundTruth(cand.image_id),
    );
    grid.append(card);
  }
  root.append(grid, button("Confirm ground truths", () => void c.submitGroundTruths()));
}

function renderAspects(
  root: HTMLElement,
  c: WorkbenchController,
  s: WorkbenchState,
): void {
  root.append(
    el("p", undefined, `Caption: "${c.fullCaption()}" — mark every aspect it uses.`),
  );
  const list = el("ul", "wb-aspects");
  for (const aspect of SEMANTIC_ASPECTS) {
    const item = el("li");
    const box = el("input");
    box.type = "checkbox";
    box.checked = s.aspectChoices.has(aspect);
    box.addEventListener("change", () => c.toggleAspect(aspect));
    const label = el("label", undefined, aspect.replace(/_/g, " "));
    label.prepend(box);
    item.append(label);
    list.append(item);
  }
  root.append(
    list,
    button("Submit votes", () => void c.submitAspectVotes()),
    button("Finalize & next", () =>
      void c
        .finalize()
        .then(() => c.loadNextReference()),
    ),
  );
}
