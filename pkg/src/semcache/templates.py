"""Prompt templates for the generation pipeline, validated at load time."""

import string
from pathlib import Path
from typing import Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from semcache.errors import TemplateError

CONF_DIR = Path(__file__).resolve().parent.parent.parent / "conf"
DEFAULT_TEMPLATE_DIR = CONF_DIR / "templates"

VARIATION_CONSTRAINT = (
    "Generate variations ONLY from the provided Question above and ONLY use the Answer "
    "to constrain the generated questions."
)

ALLOWED_PLACEHOLDERS = {
    "system": set(),
    "extract_facts": {"document_text"},
    "generate_question": {"answer", "document_text", "domain_terms"},
    "generate_variations": {"question", "answer", "guidelines", "count"},
}


def placeholders(template: str) -> set[str]:
    """Named ``{fields}`` in a format string; ``{{`` escapes are not fields."""
    try:
        return {field for _, field, _, _ in string.Formatter().parse(template) if field is not None}
    except ValueError as e:
        raise TemplateError(f"unparseable template: {e}") from e


class PromptTemplates(BaseModel):
    """The five prompt texts the pipeline renders, checked once at construction."""

    model_config = ConfigDict(frozen=True)

    system: str = Field(..., description="System message sent with every request")
    extract_facts: str
    generate_question: str
    generate_variations: str = Field(..., description="Must contain the variation constraint sentence")
    guidelines: str = Field(..., description="Paraphrase guidelines substituted into generate_variations")

    @model_validator(mode="after")
    def _check_placeholders(self) -> "PromptTemplates":
        for name, allowed in ALLOWED_PLACEHOLDERS.items():
            unknown = placeholders(getattr(self, name)) - allowed
            if unknown:
                raise TemplateError(f"template {name} uses unknown placeholders: {sorted(unknown)}")
        if VARIATION_CONSTRAINT not in self.generate_variations:
            raise TemplateError("generate_variations template lacks the variation constraint sentence")
        return self

    @classmethod
    def load(
        cls,
        directory: Optional[Union[str, Path]] = None,
        guidelines_path: Optional[Union[str, Path]] = None,
    ) -> "PromptTemplates":
        """Read the five template files.

        Args:
            directory: Directory holding ``system.txt``, ``extract_facts.txt``,
                ``generate_question.txt`` and ``generate_variations.txt``.
                Defaults to ``conf/templates``.
            guidelines_path: Guidelines file; defaults to ``guidelines.txt`` in ``directory``.

        Returns:
            Validated templates.

        Raises:
            TemplateError: On a missing file, an unknown placeholder or a missing constraint sentence.
        """
        directory = Path(directory) if directory else DEFAULT_TEMPLATE_DIR
        guidelines_path = Path(guidelines_path) if guidelines_path else directory / "guidelines.txt"

        def read(path: Path) -> str:
            try:
                return path.read_text(encoding="utf-8")
            except OSError as e:
                raise TemplateError(f"cannot read template {path}: {e}") from e

        return cls(
            system=read(directory / "system.txt"),
            extract_facts=read(directory / "extract_facts.txt"),
            generate_question=read(directory / "generate_question.txt"),
            generate_variations=read(directory / "generate_variations.txt"),
            guidelines=read(guidelines_path).strip(),
        )

    # render_* fill the templates; domain terms, guidelines and counts come from config.
    def render_extract_facts(self, document_text: str) -> str:
        return self.extract_facts.format(document_text=document_text)

    def render_generate_question(self, answer: str, document_text: str, domain_terms: list[str]) -> str:
        return self.generate_question.format(
            answer=answer,
            document_text=document_text,
            domain_terms=", ".join(domain_terms) if domain_terms else "none",
        )

    def render_generate_variations(self, question: str, answer: str, count: int) -> str:
        return self.generate_variations.format(
            question=question, answer=answer, guidelines=self.guidelines, count=count
        )
