"""In-interpreter test harness for the hintkit sandbox.

Reads one JSON execution request on stdin, loads the optional prelude and the
program, calls the entry function once per test case and writes one JSON
verdict line per case followed by {"done": true}.  Learner output is captured
and never reaches the protocol stream.
"""
import copy
import io
import json
import math
import os
import signal
import sys
import time
import traceback

REQUEST_KEYS = {"prelude", "program", "entry_function", "cases", "limits"}
CASE_KEYS = {"id", "args", "expected", "compare_mode", "timeout_ms"}
LIMIT_KEYS = {"wall_timeout_ms", "total_timeout_ms", "max_output_bytes"}
ARGS_HOOK = "__harness_args__"


class CaseTimeout(BaseException):
    pass


class HarnessConfigError(Exception):
    pass


class BoundedBuffer(io.TextIOBase):
    def __init__(self, limit):
        self.limit = limit
        self.parts = []
        self.size = 0
        self.truncated = False

    def writable(self):
        return True

    def write(self, s):
        if not isinstance(s, str):
            s = str(s)
        room = self.limit - self.size
        if room > 0:
            chunk = s[:room]
            self.parts.append(chunk)
            self.size += len(chunk)
        if len(s) > max(room, 0):
            self.truncated = True
        return len(s)

    def flush(self):
        pass

    def take(self):
        text = "".join(self.parts)
        if self.truncated:
            text += "\n[output truncated]"
        self.parts = []
        self.size = 0
        self.truncated = False
        return text


def check_keys(obj, allowed, what):
    if not isinstance(obj, dict):
        raise HarnessConfigError(f"{what} must be an object")
    unknown = set(obj) - allowed
    if unknown:
        raise HarnessConfigError(f"unknown {what} fields: {sorted(unknown)}")
    missing = allowed - set(obj)
    if what != "request" and missing:
        raise HarnessConfigError(f"missing {what} fields: {sorted(missing)}")


def parse_request(raw):
    req = json.loads(raw)
    check_keys(req, REQUEST_KEYS, "request")
    for key in ("program", "entry_function", "cases", "limits"):
        if key not in req:
            raise HarnessConfigError(f"missing request field: {key}")
    check_keys(req["limits"], LIMIT_KEYS, "limits")
    for case in req["cases"]:
        check_keys(case, CASE_KEYS, "case")
    return req


def normalize(value):
    if isinstance(value, (list, tuple)):
        return [normalize(v) for v in value]
    if isinstance(value, dict):
        return {k: normalize(v) for k, v in value.items()}
    return value


def close_enough(actual, expected, eps):
    if isinstance(actual, bool) or isinstance(expected, bool):
        return actual == expected
    if isinstance(actual, (int, float)) and isinstance(expected, (int, float)):
        return abs(actual - expected) <= eps
    if isinstance(actual, list) and isinstance(expected, list):
        return len(actual) == len(expected) and all(
            close_enough(a, e, eps) for a, e in zip(actual, expected))
    if isinstance(actual, dict) and isinstance(expected, dict):
        return actual.keys() == expected.keys() and all(
            close_enough(actual[k], expected[k], eps) for k in actual)
    return actual == expected


def compare(actual, expected, mode):
    kind = mode.get("mode", "exact")
    if kind == "boolean":
        return isinstance(actual, bool) and actual == expected
    actual = normalize(actual)
    if kind == "float_tol":
        return close_enough(actual, expected, float(mode["eps"]))
    return actual == expected


def to_wire(value, limit):
    try:
        text = json.dumps(normalize(value), allow_nan=False)
        if len(text) > limit:
            return text[:limit] + "...[truncated]"
        return json.loads(text)
    except (TypeError, ValueError, RecursionError):
        text = repr(value)
        return text[:limit] if len(text) > limit else text


def install_guard(root):
    """Denies writes outside the working directory, process spawning and sockets."""
    root = os.path.realpath(root)
    write_events = {
        "os.remove", "os.rename", "os.rmdir", "os.mkdir", "os.chmod", "os.chown",
        "os.truncate", "os.symlink", "os.link", "os.utime", "shutil.rmtree",
        "shutil.move", "shutil.copyfile", "shutil.copytree",
    }
    denied_prefixes = (
        "os.system", "os.exec", "os.posix_spawn", "os.spawn", "os.fork", "os.forkpty",
        "subprocess.", "os.kill", "os.killpg", "pty.", "socket.", "ctypes.",
        "sys.remote_exec", "os.putenv", "os.unsetenv",
    )

    def inside(path):
        if isinstance(path, int):
            return True
        try:
            full = os.path.realpath(os.fsdecode(path))
        except Exception:
            return False
        return full == root or full.startswith(root + os.sep)

    def hook(event, args):
        if event == "open":
            path, mode, flags = args
            writing = (mode is not None and any(c in str(mode) for c in "wax+")) or (
                flags is not None and flags & (os.O_WRONLY | os.O_RDWR | os.O_CREAT))
            if writing and not inside(path):
                raise PermissionError(f"sandbox: write outside working directory: {path}")
        elif event in write_events:
            for path in args:
                if isinstance(path, (str, bytes, os.PathLike)) and not inside(path):
                    raise PermissionError(f"sandbox: {event} outside working directory")
        elif event.startswith(denied_prefixes):
            raise PermissionError(f"sandbox: {event} is not permitted")

    sys.addaudithook(hook)


def apply_resource_limits():
    try:
        import resource
        gib = 1 << 30
        resource.setrlimit(resource.RLIMIT_AS, (2 * gib, 2 * gib))
        resource.setrlimit(resource.RLIMIT_FSIZE, (16 << 20, 16 << 20))
    except Exception:
        pass


def on_alarm(signum, frame):
    raise CaseTimeout()


def run_with_timeout(fn, timeout_ms):
    signal.setitimer(signal.ITIMER_REAL, timeout_ms / 1000.0)
    try:
        return fn()
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0)


def error_text(exc):
    lines = traceback.format_exception_only(type(exc), exc)
    return "".join(lines).strip()


def main():
    proto = os.fdopen(os.dup(1), "w", encoding="utf-8", newline="\n")

    def emit(obj):
        proto.write(json.dumps(obj, allow_nan=False) + "\n")
        proto.flush()

    try:
        req = parse_request(sys.stdin.read())
    except Exception as exc:
        sys.stderr.write(f"harness: bad request: {exc}\n")
        sys.exit(3)

    limits = req["limits"]
    out_limit = int(limits["max_output_bytes"])
    per_case_cap = int(limits["wall_timeout_ms"])

    devnull = os.open(os.devnull, os.O_WRONLY)
    os.dup2(devnull, 1)
    os.dup2(devnull, 2)
    capture = BoundedBuffer(out_limit)
    sys.stdout = capture
    sys.stderr = capture

    signal.signal(signal.SIGALRM, on_alarm)
    apply_resource_limits()
    install_guard(os.getcwd())

    namespace = {"__name__": "__main__", "__builtins__": __builtins__}
    load_status, load_error = None, ""
    first_timeout = min([int(c["timeout_ms"]) for c in req["cases"]] + [per_case_cap])
    started = time.perf_counter()
    try:
        def load():
            if req.get("prelude"):
                exec(compile(req["prelude"], "<prelude>", "exec"), namespace)
            exec(compile(req["program"], "<program>", "exec"), namespace)
        run_with_timeout(load, first_timeout)
        entry = namespace.get(req["entry_function"])
        if not callable(entry):
            raise NameError(f"entry function '{req['entry_function']}' is not defined")
    except CaseTimeout:
        load_status, load_error = "timeout", "program timed out while loading"
    except BaseException as exc:
        if isinstance(exc, SystemExit):
            load_error = "program called exit() while loading"
        else:
            load_error = error_text(exc)
        load_status = "error"
    load_ms = int(math.ceil((time.perf_counter() - started) * 1000))

    if load_status is not None:
        output = capture.take()
        text = load_error + ("\n" + output if output else "")
        for case in req["cases"]:
            emit({"case_id": case["id"], "status": load_status, "actual": None,
                  "stderr": text[:out_limit], "duration_ms": load_ms})
        emit({"done": True})
        proto.close()
        os._exit(0)

    adapt = namespace.get(ARGS_HOOK)
    for case in req["cases"]:
        timeout_ms = min(int(case["timeout_ms"]), per_case_cap)
        args = copy.deepcopy(case["args"])
        status, actual, err = "fail", None, ""
        started = time.perf_counter()
        try:
            def call():
                call_args = adapt(args) if callable(adapt) else args
                return entry(*call_args)
            result = run_with_timeout(call, timeout_ms)
            actual = to_wire(result, out_limit)
            status = "pass" if compare(result, case["expected"], case["compare_mode"]) else "fail"
        except CaseTimeout:
            status, err = "timeout", f"timed out after {timeout_ms} ms"
        except RecursionError as exc:
            status, err = "error", error_text(exc)
        except MemoryError:
            status, err = "error", "MemoryError"
        except SystemExit:
            status, err = "error", "program called exit()"
        except BaseException as exc:
            status, err = "error", error_text(exc)
        elapsed = int(math.ceil((time.perf_counter() - started) * 1000))
        output = capture.take()
        text = err + ("\n" + output if err and output else output)
        emit({"case_id": case["id"], "status": status, "actual": actual,
              "stderr": text[:out_limit], "duration_ms": elapsed})

    emit({"done": True})
    proto.close()
    os._exit(0)


if __name__ == "__main__":
    main()
