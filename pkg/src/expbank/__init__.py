"""State-level experience bank for tool-using agents.

Historical trajectories are judged in hindsight, filtered by quality, and
indexed under several state viewpoints so an agent can run wide, deep or
deep-and-wide retrieval before each action.
"""

from expbank.core import Action, HistoryEntry, Outcome, State, Step, Trajectory, VisualRef
from expbank.viewpoint import VIEWPOINT_IDS, list_viewpoints, project
from expbank.embed import HashEmbedder, RemoteEmbedder, hash_embed
from expbank.judge import JudgeConfig, ScriptedJudge, RemoteJudge, StepJudgement
from expbank.abstract import AbstractionConfig, AbstractionStats, Experience, build_bank
from expbank.index import ExperienceBank, FlatIndex, ScoredExperience, cosine
from expbank.search import GuidanceSet, SearchParams, deep_search, deep_wide_search, format_guidance, wide_search
from expbank.store import load, save

__all__ = [
    "Action", "HistoryEntry", "Outcome", "State", "Step", "Trajectory", "VisualRef",
    "VIEWPOINT_IDS", "list_viewpoints", "project",
    "HashEmbedder", "RemoteEmbedder", "hash_embed",
    "JudgeConfig", "ScriptedJudge", "RemoteJudge", "StepJudgement",
    "AbstractionConfig", "AbstractionStats", "Experience", "build_bank",
    "ExperienceBank", "FlatIndex", "ScoredExperience", "cosine",
    "GuidanceSet", "SearchParams", "deep_search", "deep_wide_search", "format_guidance", "wide_search",
    "load", "save",
]
