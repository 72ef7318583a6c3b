"""Backend walkthrough: deterministic stubs, the response-parsing cascade,
and how a live endpoint would be declared.

Run from the repository root:  python demos/03_backends_and_parsing.py
"""

from cbdetect import (
    BackendDescriptor,
    BackendKind,
    CyberbullyingLabel,
    ParseFailure,
    RawResponse,
    RetryPolicy,
    Task,
    class_name_stub,
    classify,
    load_template,
    parse_label,
    render_zero_shot,
    synth_fixture,
)

# --- 1. the rule-based stub ------------------------------------------------
# Stub rules match against the post content (prompt instructions enumerate
# every class name, so scanning the whole prompt would be ambiguous).
posts = synth_fixture(1, Task.CYBERBULLYING, seed=2)
stub = class_name_stub(Task.CYBERBULLYING)
template = load_template("zero_shot_v1", Task.CYBERBULLYING)
print("stub responses on the synthetic fixture:")
for post in posts:
    response = classify(render_zero_shot(post, template), stub)
    print(f"  gold={post.label.display_name:<17} response={response.text!r}")

# --- 2. the parsing cascade -------------------------------------------------
# 1) exact display name, 2) synonym table, 3) earliest display-name
# substring. Anything else is a ParseFailure the caller must decide about.
print("\nparsing cascade:")
samples = [
    "Religion",
    "I think this is not bullying at all.",
    "Could be Gender/Sexual or Ethnicity/Race, leaning to the first.",
    "beep boop 42",
]
for text in samples:
    raw = RawResponse(text=text, latency=0.0, backend_id="demo")
    try:
        parsed = parse_label(raw, CyberbullyingLabel)
        print(f"  {text!r:<62} -> {parsed.label.name} ({parsed.match_kind.value})")
    except ParseFailure:
        print(f"  {text!r:<62} -> ParseFailure")

# --- 3. a live endpoint declaration -----------------------------------------
# The address can live in config; credentials only ever come from the
# environment (CBDETECT_API_KEY), so manifests stay shareable. Requests are
# retried on transient failures per the policy, with a per-attempt log, and
# timeouts surface as a distinct error type.
live = BackendDescriptor(
    backend_id="prod-gemma",
    kind=BackendKind.LIVE_ENDPOINT,
    model_name="gemma-2-2b-it",
    endpoint_address="https://inference.example.com/v1/chat/completions",
    max_parallel_requests=4,
    timeout=30.0,
    retry_policy=RetryPolicy(max_attempts=3, backoff=(0.5, 1.0, 2.0)),
)
print("\nlive descriptor as it would appear in a run manifest:")
print(" ", live.to_dict())
