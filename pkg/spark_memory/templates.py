"""
Bundled prompt templates
Judge, code-generation and pipeline prompts stored verbatim as versioned text assets
"""

import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Mapping, Tuple

import yaml

from .errors import TemplateError

TEMPLATE_DIR = Path(__file__).parent / "templates"


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    version: int
    text: str
    style: str
    placeholders: Tuple[str, ...]

    def marker(self, name: str) -> str:
        return "{{" + name + "}}" if self.style == "double" else "{" + name + "}"

    def render(self, variables: Mapping[str, str]) -> str:
        """Substitute every declared placeholder in one pass; values are never re-scanned"""
        for name in self.placeholders:
            if name not in variables or variables[name] is None:
                raise TemplateError(f"template {self.template_id} is missing a value for placeholder {name!r}")
        if not self.placeholders:
            return self.text
        lookup = {self.marker(name): str(variables[name]) for name in self.placeholders}
        pattern = re.compile("|".join(re.escape(m) for m in sorted(lookup, key=len, reverse=True)))
        return pattern.sub(lambda m: lookup[m.group(0)], self.text)


class TemplateLibrary:
    """Templates declared in templates/manifest.yaml"""

    def __init__(self, directory: Path = TEMPLATE_DIR):
        manifest = yaml.safe_load((directory / "manifest.yaml").read_text(encoding="utf-8"))
        self._templates: Dict[str, PromptTemplate] = {}
        for template_id, entry in manifest["templates"].items():
            text = (directory / entry["file"]).read_text(encoding="utf-8")
            template = PromptTemplate(
                template_id=template_id,
                version=int(entry["version"]),
                text=text,
                style=entry.get("style", "single"),
                placeholders=tuple(entry.get("placeholders") or ()),
            )
            for name in template.placeholders:
                if template.marker(name) not in text:
                    raise TemplateError(f"template {template_id} does not contain placeholder {name!r}")
            self._templates[template_id] = template

    def get(self, template_id: str) -> PromptTemplate:
        template = self._templates.get(template_id)
        if template is None:
            raise TemplateError(f"unknown template: {template_id}")
        return template

    def ids(self):
        return sorted(self._templates)


@lru_cache(maxsize=1)
def get_library() -> TemplateLibrary:
    return TemplateLibrary()


def render_template(template_id: str, variables: Mapping[str, str]) -> str:
    return get_library().get(template_id).render(variables)
