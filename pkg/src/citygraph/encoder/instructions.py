"""The four fixed instruction templates for contrastive queries."""

from dataclasses import dataclass

from ..errors import ConfigError


@dataclass(frozen=True)
class InstructionTemplate:
    stage: int
    variant: str
    text: str

    def query(self, destination=None) -> str:
        """Instruction-augmented query text: modality tokens, then 'Instruct: {tau}'."""
        prefix = "[IMAGE_TOKEN]" if self.stage == 1 else "[GRAPH_TOKEN][IMAGE_TOKEN]"
        tau = self.text.replace("{destination}", destination) if destination else self.text
        return f"{prefix} Instruct: {tau}"


TEMPLATES = (
    InstructionTemplate(1, "path", "Describe whether the {destination} is reachable from this viewpoint."),
    InstructionTemplate(1, "caption", "Provide a detailed description of the image content."),
    InstructionTemplate(
        2, "path",
        "Refer to the image and spatial graph, describe the pedestrian navigation context and spatial paths "
        "from this viewpoint.",
    ),
    InstructionTemplate(2, "context", "Use the image and graph together to describe the scene and its spatial context."),
)


def template(stage: int, variant: str) -> InstructionTemplate:
    for t in TEMPLATES:
        if t.stage == stage and t.variant == variant:
            return t
    raise ConfigError(f"no instruction template for stage {stage} / {variant!r}")
