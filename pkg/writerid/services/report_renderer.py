"""
Run report renderer.
Renders Markdown test reports from the YAML section template with Jinja2.
"""

from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import structlog
import yaml
from jinja2 import Environment, StrictUndefined

from .. import __version__
from .evaluation import REPORT_HEADER, AggregateReport, report_rows

logger = structlog.get_logger()

TEMPLATES_DIR = Path(__file__).resolve().parent.parent / "templates"


class RunReportRenderer:
    """Builds a Markdown report from `templates/<template_name>/structure.yaml`."""

    def __init__(self, template_name: str = "run_report", template_path: Optional[Path] = None):
        self.template_name = template_name
        self.template_path = Path(template_path) if template_path else TEMPLATES_DIR / template_name / "structure.yaml"
        self.environment = Environment(undefined=StrictUndefined, trim_blocks=True, lstrip_blocks=True)

    def _load_template(self) -> Dict[str, Any]:
        if not self.template_path.exists():
            raise FileNotFoundError(f"Template not found: {self.template_path}")
        with open(self.template_path, "r") as f:
            return yaml.safe_load(f)[f"{self.template_name}_template"]

    def build_context(
        self,
        aggregate: AggregateReport,
        title: str,
        settings: Optional[Dict[str, Any]] = None,
        runs: Optional[List[Dict[str, Any]]] = None,
    ) -> Dict[str, Any]:
        return {
            "title": title,
            "runs_count": aggregate.runs,
            "metrics": [{"name": name, "cell": value.cell()} for name, value in aggregate.metrics.items()],
            "header": REPORT_HEADER,
            "rows": report_rows(aggregate),
            "runs": runs or [],
            "settings": yaml.safe_dump(settings, sort_keys=False).rstrip() if settings else "",
        }

    def _render_sections(self, sections: List[Dict[str, Any]], context: Dict[str, Any]) -> List[Dict[str, Any]]:
        rendered = []
        for section in sorted(sections, key=lambda s: s.get("order", 999)):
            content = self.environment.from_string(section.get("template", "")).render(**context).strip()
            if content or section.get("required", False):
                rendered.append({"title": section.get("title", ""), "content": content})
        return rendered

    def render(self, aggregate: AggregateReport, title: str, settings: Optional[Dict[str, Any]] = None,
               runs: Optional[List[Dict[str, Any]]] = None) -> str:
        template_data = self._load_template()
        context = self.build_context(aggregate, title, settings, runs)
        parts = [f"# {template_data.get('title', 'Report')}: {title}\n"]
        parts.append(f"- **Generated**: {datetime.now(timezone.utc).isoformat(timespec='seconds')}")
        parts.append(f"- **Version**: {__version__}")
        parts.append(f"- **Runs**: {aggregate.runs}\n")
        for section in self._render_sections(template_data.get("sections", []), context):
            parts.append(f"## {section['title']}\n")
            parts.append(section["content"] + "\n")
        return "\n".join(parts)

    def write(self, path: Path, aggregate: AggregateReport, title: str,
              settings: Optional[Dict[str, Any]] = None, runs: Optional[List[Dict[str, Any]]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.render(aggregate, title, settings, runs))
        logger.info("report_written", path=str(path), template=self.template_name, runs=aggregate.runs)
        return path
