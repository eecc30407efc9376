"""Task plans, the plan text grammar and planning backends.

Plans are numbered lines, one verb phrase each, ending with DONE:

    0. Walk to kitchen
    1. Gather ingredients
    2. Start cooking
    3. DONE

Verb phrases are matched against a fixed keyword table.  A numbered line that
matches no phrase is an error; unnumbered lines (chatter around the plan) are
ignored.

"""
import dataclasses
import importlib.resources
import json
import logging
import re
import time
from .catalog import CATALOG, ROBOT
from .exceptions import (
    BadConfig,
    PlanParseFailure,
    UnknownAction,
    UnterminatedPlan,
)
from .llm import load_prompt, prompt_hash
from .scene import distance


LOGGER = logging.getLogger("riskgraph")

VERBS = (
    "Walk", "PickUp", "Place", "Open", "Close", "StartCook",
    "HandleSafetyIssue", "EnsureSafe", "SecureObject", "Done",
)

MITIGATION_VERBS = ("EnsureSafe", "SecureObject", "HandleSafetyIssue")

COMPLEXITIES = ("simple", "intermediate", "complex")

PARSE_RETRIES = 2

_THE = r"(?:the )?"

# Order matters: the first matching phrase wins
PHRASES = (
    ("Walk", re.compile(rf"walk (?:to|over to) {_THE}(.+)", re.I)),
    ("PickUp", re.compile(rf"(?:pick up|grab|take) {_THE}(.+)", re.I)),
    ("PickUp", re.compile(rf"gather {_THE}(.+)", re.I)),
    ("Place", re.compile(
        rf"(?:place|put) {_THE}(.+?) (?:in|on|into|onto|inside) {_THE}(.+)",
        re.I,
    )),
    ("Open", re.compile(rf"open {_THE}(.+)", re.I)),
    ("Close", re.compile(rf"close {_THE}(.+)", re.I)),
    ("StartCook", re.compile(r"start cooking(?: .*)?", re.I)),
    ("EnsureSafe", re.compile(
        rf"ensure (?:that )?{_THE}(.+?) is (?:in )?(?:a )?safe"
        r"(?: location| place| distance.*)?",
        re.I,
    )),
    ("SecureObject", re.compile(
        rf"secure {_THE}(.+?)"
        r"(?: in (?:a|the) (?:designated|safe) (?:area|location|place))?",
        re.I,
    )),
    ("HandleSafetyIssue", re.compile(
        rf"handle {_THE}safety issue(?: with| for| involving)? {_THE}(.+)",
        re.I,
    )),
    ("Done", re.compile(r"done", re.I)),
)

_NUMBERED = re.compile(r"^\s*(\d+)\s*[.):]\s*(.*?)\s*$")


@dataclasses.dataclass(frozen=True)
class Action:
    """One plan step."""

    index: int
    verb: str
    args: tuple = ()
    raw: str = dataclasses.field(default="", compare=False)

    def __post_init__(self):
        """Check action invariants."""
        if self.verb not in VERBS:
            raise BadConfig(f"Unknown verb: {self.verb}")
        if self.verb in ("Done", "StartCook") and self.args:
            raise BadConfig(f"{self.verb} takes no arguments")

    @property
    def key(self):
        """Return (verb, canonical args) for comparing steps."""
        return (self.verb, tuple(canonical(a) for a in self.args))

    @property
    def is_mitigation(self):
        """Return True for safety steps."""
        return self.verb in MITIGATION_VERBS


@dataclasses.dataclass(frozen=True)
class TaskPlan:
    """Ordered plan; revision 0 is the initial plan."""

    task_name: str
    steps: tuple
    revision: int = 0

    def __post_init__(self):
        """Check plan invariants."""
        if not self.steps or self.steps[-1].verb != "Done":
            raise UnterminatedPlan(f"{self.task_name}: plan must end in DONE")
        if [s.index for s in self.steps] != list(range(len(self.steps))):
            raise BadConfig(f"{self.task_name}: step indices out of order")


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    """Benchmark task with a goal predicate over the final scene."""

    name: str
    complexity: str
    description: str
    template: tuple
    goal: dict

    def __post_init__(self):
        """Check task invariants."""
        if self.complexity not in COMPLEXITIES:
            raise BadConfig(f"{self.name}: bad complexity {self.complexity}")
        _check_goal(self.goal)

    def goal_met(self, scene):
        """Return True if the goal predicate holds on scene."""
        return _goal_met(self.goal, scene)


def canonical(name):
    """Return the catalog spelling of a name, or its lower case form."""
    return CATALOG.resolve(name) or name.strip().lower()


def _check_goal(goal):
    if not isinstance(goal, dict) or len(set(goal) - {"within"}) != 1:
        raise BadConfig(f"Bad goal predicate: {goal}")
    if "all" in goal:
        for part in goal["all"]:
            _check_goal(part)
    elif not {"near", "state", "not_state"} & set(goal):
        raise BadConfig(f"Bad goal predicate: {goal}")


def _goal_met(goal, scene):
    if "all" in goal:
        return all(_goal_met(part, scene) for part in goal["all"])
    if "near" in goal:
        first, second = goal["near"]
        within = goal.get("within", 0.5)
        return any(
            distance(a, b) <= within
            for a in scene.entities if a.category == first
            for b in scene.entities if b.category == second
        )
    kind, flag = goal.get("state") or goal["not_state"]
    found = any(
        flag in e.state for e in scene.entities if e.category == kind
    )
    return found if "state" in goal else not found


def load_tasks():
    """Load the packaged benchmark tasks."""
    text = importlib.resources.files("riskgraph").joinpath(
        "data/tasks.json"
    ).read_text(encoding="utf-8")
    return tuple(
        TaskSpec(
            name=doc["name"],
            complexity=doc["complexity"],
            description=doc["description"],
            template=tuple(doc["template"]),
            goal=doc["goal"],
        )
        for doc in json.loads(text)["tasks"]
    )


def get_task(name):
    """Return the benchmark task with the given name."""
    for task in load_tasks():
        if task.name == name:
            return task
    raise BadConfig(f"Unknown task: {name}")


def _clean(arg):
    return re.sub(r"^(?:the )", "", arg.strip().rstrip("."), flags=re.I)


def parse_action(index, phrase):
    """Map one verb phrase to an Action."""
    phrase = phrase.strip().rstrip(".").strip()
    for verb, pattern in PHRASES:
        match = pattern.fullmatch(phrase)
        if not match:
            continue
        args = tuple(_clean(g) for g in match.groups())
        if verb == "HandleSafetyIssue":
            kind = CATALOG.resolve(args[0])
            is_agent = kind is not None and CATALOG.is_agent(kind)
            verb = "EnsureSafe" if is_agent else "SecureObject"
        return Action(index=index, verb=verb, args=args, raw=phrase)
    raise UnknownAction(phrase)


def parse_plan(text, task_name=""):
    """Parse plan text into a TaskPlan.

    Parsing stops at the first DONE.  Step indices are renumbered from 0 in
    order of appearance.

    """
    steps = []
    for line in text.splitlines():
        match = _NUMBERED.match(line)
        if not match:
            if line.strip():
                LOGGER.debug("skip unnumbered line: %s", line.strip())
            continue
        action = parse_action(len(steps), match.group(2))
        steps.append(action)
        if action.verb == "Done":
            return TaskPlan(task_name=task_name, steps=tuple(steps))
    raise UnterminatedPlan("Plan has no DONE line")


def render_action(action):
    """Return the canonical phrase of an action."""
    args = action.args
    phrases = {
        "Walk": lambda: f"Walk to {args[0]}",
        "PickUp": lambda: f"Pick up {args[0]}",
        "Place": lambda: f"Place {args[0]} in {args[1]}",
        "Open": lambda: f"Open {args[0]}",
        "Close": lambda: f"Close {args[0]}",
        "StartCook": lambda: "Start cooking",
        "EnsureSafe": lambda: f"Ensure {args[0]} is in a safe location",
        "SecureObject": lambda: f"Secure {args[0]} in a designated area",
        "HandleSafetyIssue": lambda: f"Handle safety issue with {args[0]}",
        "Done": lambda: "DONE",
    }
    return phrases[action.verb]()


def render_plan(plan):
    """Inverse of parse_plan."""
    return "".join(
        f"{step.index}. {render_action(step)}\n" for step in plan.steps
    )


def renumber(task_name, actions, revision=0):
    """Build a TaskPlan from actions, fixing their indices."""
    return TaskPlan(
        task_name=task_name,
        steps=tuple(
            dataclasses.replace(action, index=i)
            for i, action in enumerate(actions)
        ),
        revision=revision,
    )


def mitigations_for(notice):
    """Return the mitigation actions that resolve one safety notice.

    Agents are moved to safety and the objects they are endangered by are
    secured.  Object-only notices secure the hazard-attributed endpoint, or
    the movable one.  The robot is never moved or secured.

    """
    categories = [c for c in notice.categories if c != ROBOT]
    agents = [c for c in categories if CATALOG.is_agent(c)]
    objects = [c for c in categories if not CATALOG.is_agent(c)]
    hazard = CATALOG.hazard_attributes

    def securable(kind):
        attributes = CATALOG.base_attributes(kind)
        return CATALOG.is_movable(kind) or bool(attributes & hazard)

    if agents:
        secure = [k for k in objects if securable(k)]
    else:
        hazardous = [k for k in objects if CATALOG.base_attributes(k) & hazard]
        movable = [k for k in objects if CATALOG.is_movable(k)]
        secure = (hazardous or movable)[:1]
    actions = [Action(0, "EnsureSafe", (agent,)) for agent in agents]
    actions += [Action(0, "SecureObject", (kind,)) for kind in secure]
    unique = {}
    for action in actions:
        unique.setdefault(action.key, action)
    return list(unique.values())


def is_covered(notice, plan, cursor):
    """Return True if pending steps already mitigate the notice."""
    pending = {step.key for step in plan.steps[cursor:]}
    return all(m.key in pending for m in mitigations_for(notice))


def task_message(task, summary):
    """Return the user message of an initial planning request."""
    return f"Task: {task.description}\n\n{summary}\n"


def replan_message(plan, notices, cursor, summary):
    """Return the user message of a replanning request."""
    executed = (
        f"Steps 0 to {cursor - 1} are already executed."
        if cursor else "No steps are executed yet."
    )
    notice_lines = "".join(f"- {notice.text}\n" for notice in notices)
    return (
        f"Current plan (revision {plan.revision}):\n{render_plan(plan)}"
        f"{executed}\n\nSafety notices:\n{notice_lines}\n{summary}\n"
    )


_SUMMARY_CATEGORY = re.compile(r"^- \S+ \((\w+)\)", re.M)


class MockPlanner:
    """Deterministic offline planner.

    The initial plan is the task template.  Replanning inserts the
    mitigations of every notice before the first pending step, skipping
    mitigations that are already pending.  With safety_prompt, vulnerable
    agents named in the scene summary are moved to safety before cooking.

    """

    retries = 0

    def __init__(self, safety_prompt=False):
        """Pick the prompt variant."""
        self.safety_prompt = safety_prompt
        self.name = "mock-safe" if safety_prompt else "mock"
        self.prompt = "safe" if safety_prompt else "base"
        self.system = load_prompt(self.prompt)
        self.transcripts = []

    def _record(self, prompt, user, response):
        self.transcripts.append({
            "request": {"system": load_prompt(prompt), "user": user},
            "response": response,
            "prompt": prompt_hash(prompt),
        })

    def draft(self, task, summary, feedback=None):
        """Return the initial plan text."""
        # pylint: disable=unused-argument
        actions = [parse_action(0, line) for line in task.template]
        if self.safety_prompt:
            vulnerable = sorted({
                kind for kind in _SUMMARY_CATEGORY.findall(summary)
                if CATALOG.tier(kind) == "vulnerable"
            })
            cook = next(
                (i for i, a in enumerate(actions) if a.verb == "StartCook"),
                None,
            )
            if cook is not None:
                actions[cook:cook] = [
                    Action(0, "EnsureSafe", (kind,)) for kind in vulnerable
                ]
        text = render_plan(renumber(task.name, actions))
        self._record(self.prompt, task_message(task, summary), text)
        return text

    def draft_replan(self, plan, notices, cursor, summary, feedback=None):
        """Return the revised plan text."""
        # pylint: disable=too-many-arguments,too-many-positional-arguments
        # pylint: disable=unused-argument
        pending = {step.key for step in plan.steps[cursor:]}
        inserted = []
        for notice in notices:
            for action in mitigations_for(notice):
                if action.key not in pending:
                    pending.add(action.key)
                    inserted.append(action)
        steps = list(plan.steps)
        steps[cursor:cursor] = inserted
        text = render_plan(renumber(plan.task_name, steps))
        self._record(
            "replan",
            replan_message(plan, notices, cursor, summary),
            text,
        )
        return text


class HttpPlanner:
    """Planner backed by an LLM over HTTP."""

    retries = PARSE_RETRIES

    def __init__(self, client, safety_prompt=False):
        """Wrap an LlmClient."""
        self.client = client
        self.safety_prompt = safety_prompt
        self.name = "http-safe" if safety_prompt else "http"
        self.prompt = "safe" if safety_prompt else "base"
        self.system = load_prompt(self.prompt)

    @property
    def transcripts(self):
        """Return the request/response log of the client."""
        return self.client.transcripts

    @staticmethod
    def _with_feedback(user, feedback):
        if not feedback:
            return user
        return (
            f"{user}\nYour previous reply could not be parsed: {feedback}\n"
            "Reply again with a numbered plan using only the listed "
            "phrases.\n"
        )

    def draft(self, task, summary, feedback=None):
        """Ask the LLM for an initial plan."""
        return self.client.complete(
            self.system,
            self._with_feedback(task_message(task, summary), feedback),
            prompt=self.prompt,
        )

    def draft_replan(self, plan, notices, cursor, summary, feedback=None):
        """Ask the LLM for a revised plan."""
        # pylint: disable=too-many-arguments,too-many-positional-arguments
        return self.client.complete(
            load_prompt("replan"),
            self._with_feedback(
                replan_message(plan, notices, cursor, summary), feedback
            ),
            prompt="replan",
        )


def _parse_with_retries(draft, backend, task_name, timings):
    """Call draft(feedback) until its reply parses."""
    feedback = None
    for attempt in range(backend.retries + 1):
        start = time.perf_counter()
        text = draft(feedback)
        middle = time.perf_counter()
        try:
            plan = parse_plan(text, task_name)
        except (UnterminatedPlan, UnknownAction) as err:
            feedback = str(err)
            LOGGER.warning(
                "%s: unparsable plan (attempt %s): %s",
                backend.name, attempt + 1, err,
            )
            continue
        finally:
            if timings is not None:
                timings.setdefault("generate", []).append(middle - start)
                timings.setdefault("parse", []).append(
                    time.perf_counter() - middle
                )
        return plan
    raise PlanParseFailure(
        f"{backend.name}: no parsable plan after {backend.retries} retries: "
        f"{feedback}"
    )


def initial_plan(task, summary, backend, timings=None):
    """Return revision 0 of the plan for a task."""
    plan = _parse_with_retries(
        lambda feedback: backend.draft(task, summary, feedback),
        backend, task.name, timings,
    )
    LOGGER.debug("%s: initial plan with %s steps", task.name, len(plan.steps))
    return plan


def replan(plan, notices, backend, *, cursor=0, summary="", timings=None):
    """Return the plan revised for notices, revision + 1."""
    # pylint: disable=too-many-arguments
    if not notices:
        raise BadConfig("replan needs at least one notice")
    revised = _parse_with_retries(
        lambda feedback: backend.draft_replan(
            plan, notices, cursor, summary, feedback
        ),
        backend, plan.task_name, timings,
    )
    LOGGER.info(
        "%s: replanned for %s notices, revision %s",
        plan.task_name, len(notices), plan.revision + 1,
    )
    return dataclasses.replace(revised, revision=plan.revision + 1)
