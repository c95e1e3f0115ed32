"""Transformers-backed bundle: CLIP, zero-shot grounding and SAM.

Loaded lazily; any import or checkpoint failure surfaces as
BackendUnavailable so callers (and tests) can fall back or skip. Tagging is
CLIP zero-shot scoring of the whole image against the configured vocabulary
(no dedicated tagging network is shipped through transformers).
"""

from __future__ import annotations

import numpy as np

from .backends import GroundedBox, ModelBundle
from .config import ExtractorConfig
from .errors import BackendError, BackendUnavailable

_TAG_SCORE_THRESHOLD = 0.15


def _load(config: ExtractorConfig):
    try:
        import torch
        from transformers import (
            AutoModel,
            AutoImageProcessor,
            AutoProcessor,
            CLIPModel,
            CLIPProcessor,
            SamModel,
            SamProcessor,
            AutoModelForZeroShotObjectDetection,
        )
    except Exception as exc:  # ImportError or partial installs
        raise BackendUnavailable(f"transformers backend unavailable: {exc}") from exc
    try:
        clip = CLIPModel.from_pretrained(config.clip_model).to(config.device).eval()
        clip_proc = CLIPProcessor.from_pretrained(config.clip_model)
        dino = AutoModel.from_pretrained(config.dino_model).to(config.device).eval()
        dino_proc = AutoImageProcessor.from_pretrained(config.dino_model)
        grounder = AutoModelForZeroShotObjectDetection.from_pretrained(
            config.grounder_model).to(config.device).eval()
        grounder_proc = AutoProcessor.from_pretrained(config.grounder_model)
        sam = SamModel.from_pretrained(config.segmenter_model).to(config.device).eval()
        sam_proc = SamProcessor.from_pretrained(config.segmenter_model)
    except Exception as exc:  # checkpoints unreachable, OOM, ...
        raise BackendUnavailable(f"cannot load checkpoints: {exc}") from exc
    return torch, (clip, clip_proc), (dino, dino_proc), (grounder, grounder_proc), (sam, sam_proc)


class TransformersBundleParts:
    """Shared lazily-loaded models behind the backend protocols."""

    def __init__(self, config: ExtractorConfig):
        (self._torch, (self._clip, self._clip_proc), (self._dino, self._dino_proc),
         (self._grounder, self._grounder_proc), (self._sam, self._sam_proc)) = _load(config)
        self._config = config
        self.d_clip = int(self._clip.config.projection_dim)
        self.d_dino = int(self._dino.config.hidden_size)

    # --- tagging (CLIP zero-shot over the vocabulary)

    def tag(self, rgb: np.ndarray) -> list[str]:
        torch = self._torch
        prompts = [f"a photo of a {label}" for label in self._config.tag_vocabulary]
        with torch.no_grad():
            inputs = self._clip_proc(text=prompts, images=rgb, return_tensors="pt",
                                     padding=True).to(self._config.device)
            logits = self._clip(**inputs).logits_per_image.softmax(dim=-1)[0]
        scores = logits.cpu().numpy()
        return [label for label, score in zip(self._config.tag_vocabulary, scores)
                if score >= _TAG_SCORE_THRESHOLD]

    # --- grounding

    def ground(self, rgb: np.ndarray, labels: list[str]) -> list[GroundedBox]:
        if not labels:
            return []
        torch = self._torch
        text = ". ".join(labels) + "."
        with torch.no_grad():
            inputs = self._grounder_proc(images=rgb, text=text,
                                         return_tensors="pt").to(self._config.device)
            outputs = self._grounder(**inputs)
            results = self._grounder_proc.post_process_grounded_object_detection(
                outputs, inputs.input_ids, threshold=0.0, text_threshold=0.25,
                target_sizes=[rgb.shape[:2]])[0]
        boxes = []
        for box, score, label in zip(results["boxes"], results["scores"],
                                     results.get("text_labels", results["labels"])):
            x0, y0, x1, y1 = (float(v) for v in box)
            probability = float(score)
            probability = min(max(probability, 1e-6), 1 - 1e-6)
            logit = float(np.log(probability / (1.0 - probability)))
            boxes.append(GroundedBox(label=str(label), x0=x0, y0=y0, x1=x1, y1=y1,
                                     logit=logit))
        return boxes

    # --- segmentation

    def segment(self, rgb: np.ndarray, boxes: list[GroundedBox]) -> list[np.ndarray]:
        if not boxes:
            return []
        torch = self._torch
        input_boxes = [[[box.x0, box.y0, box.x1, box.y1] for box in boxes]]
        with torch.no_grad():
            inputs = self._sam_proc(rgb, input_boxes=input_boxes,
                                    return_tensors="pt").to(self._config.device)
            outputs = self._sam(**inputs, multimask_output=False)
            masks = self._sam_proc.image_processor.post_process_masks(
                outputs.pred_masks.cpu(), inputs["original_sizes"].cpu(),
                inputs["reshaped_input_sizes"].cpu())[0]
        return [np.asarray(mask[0].numpy(), dtype=bool) for mask in masks]

    # --- embeddings

    def embed(self, rgb: np.ndarray,
              boxes: list[GroundedBox]) -> tuple[np.ndarray, np.ndarray]:
        torch = self._torch
        clips, dinos = [], []
        for box in boxes:
            r0, r1 = int(box.y0), max(int(np.ceil(box.y1)), int(box.y0) + 1)
            c0, c1 = int(box.x0), max(int(np.ceil(box.x1)), int(box.x0) + 1)
            crop = rgb[r0:r1, c0:c1]
            with torch.no_grad():
                clip_in = self._clip_proc(images=crop,
                                          return_tensors="pt").to(self._config.device)
                clip_vec = self._clip.get_image_features(**clip_in)[0].cpu().numpy()
                dino_in = self._dino_proc(images=crop,
                                          return_tensors="pt").to(self._config.device)
                dino_vec = self._dino(**dino_in).last_hidden_state[0, 0].cpu().numpy()
            clips.append(clip_vec / np.linalg.norm(clip_vec))
            dinos.append(dino_vec / np.linalg.norm(dino_vec))
        if not boxes:
            return (np.empty((0, self.d_clip)), np.empty((0, self.d_dino)))
        return np.vstack(clips), np.vstack(dinos)

    def embed_text(self, text: str) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            inputs = self._clip_proc(text=[text], return_tensors="pt",
                                     padding=True).to(self._config.device)
            vec = self._clip.get_text_features(**inputs)[0].cpu().numpy()
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise BackendError(f"text embedding collapsed for {text!r}")
        return vec / norm


def build_bundle(config: ExtractorConfig) -> ModelBundle:
    parts = TransformersBundleParts(config)
    return ModelBundle(tagger=parts, grounder=parts, segmenter=parts,
                       embedder=parts, text_embedder=parts)
