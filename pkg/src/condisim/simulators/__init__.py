from .tasks import TaskDefinition, get_task, sample_prior, task_names
from .oracles import rejection_abc

__all__ = ["TaskDefinition", "get_task", "sample_prior", "task_names", "rejection_abc"]
