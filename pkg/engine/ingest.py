import io
import logging
import os
from collections import Counter
from datetime import datetime

import pandas as pd

from models import (
    TIME_MODES,
    TIMESTAMP_FORMAT,
    CheckIn,
    Dataset,
    MalformedInputError,
    Stay,
    TimeSlot,
    ValidationError,
    VenueProfile,
)

logger = logging.getLogger(__name__)

CHECKIN_HEADER = ("user_id", "timestamp", "poi_id")
VENUE_HEADER = ("poi_id", "category", "functionalities")
MAX_MALFORMED_RATIO = 0.01

# session -> [start hour, end hour)
SESSION_HOURS = ((6, 12), (12, 17), (17, 24), (0, 6))


def read_text(source):
    """Whole text of a path or open stream; bytes that are not UTF-8 raise ValidationError."""
    name = source if isinstance(source, (str, os.PathLike)) else getattr(source, "name", "<stream>")
    try:
        if isinstance(source, (str, os.PathLike)):
            with open(source, "r", encoding="utf-8") as f:
                return f.read()
        return source.read()
    except UnicodeDecodeError as e:
        raise ValidationError(f"{name}: not valid UTF-8 at byte {e.start}") from e


def parse_checkins(source, report=None, window=None, max_malformed_ratio=MAX_MALFORMED_RATIO):
    """
    Parse a check-in CSV (header `user_id,timestamp,poi_id`).

    Malformed lines are appended to `report` as (line_number, line, reason)
    and left out of the result. More than 1% malformed lines rejects the file.
    """
    lines = read_text(source).splitlines()
    if not lines:
        return []
    if tuple(c.strip() for c in lines[0].split(",")) != CHECKIN_HEADER:
        raise ValidationError(f"Expected header {','.join(CHECKIN_HEADER)}, got {lines[0]!r}")

    body = pd.Series(lines[1:], dtype=object)
    if body.empty:
        return []

    parts = body.str.split(",", expand=True).reindex(columns=range(3)).astype(object)
    users = parts[0].fillna("").str.strip()
    pois = parts[2].fillna("").str.strip()
    stamps = pd.to_datetime(parts[1].str.strip(), format=TIMESTAMP_FORMAT, errors="coerce")

    reasons = pd.Series("", index=body.index, dtype=object)
    reasons[stamps.isna()] = "bad timestamp"
    reasons[(users == "") | (pois == "")] = "empty identifier"
    reasons[body.str.count(",") != 2] = "expected 3 columns"
    if window is not None:
        lo, hi = window
        outside = stamps.notna() & ((stamps < lo) | (stamps > hi))
        reasons[outside & (reasons == "")] = "outside observation window"

    bad = reasons != ""
    # line numbers are 1-based and the header is line 1
    bad_lines = (body.index[bad] + 2).tolist()
    if report is not None:
        report.extend(zip(bad_lines, body[bad].tolist(), reasons[bad].tolist()))
    if bad_lines:
        logger.warning(f"{len(bad_lines)} malformed check-in lines (first at line {bad_lines[0]})")
    if len(bad_lines) > max_malformed_ratio * len(body):
        raise MalformedInputError(
            f"{len(bad_lines)} of {len(body)} lines are malformed; first offenders: {bad_lines[:10]}",
            bad_lines[:10],
        )

    good = ~bad
    return [
        CheckIn(u, ts, b)
        for u, ts, b in zip(
            users[good].tolist(), stamps[good].dt.to_pydatetime().tolist(), pois[good].tolist()
        )
    ]


def load_venues(source):
    """Parse the venue CSV into poi_id -> VenueProfile."""
    text = read_text(source)
    frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False)
    if tuple(frame.columns) != VENUE_HEADER:
        raise ValidationError(f"Expected header {','.join(VENUE_HEADER)}, got {','.join(frame.columns)}")

    venues = {}
    for line_no, row in enumerate(frame.itertuples(index=False), start=2):
        poi_id = row.poi_id.strip()
        if not poi_id:
            raise ValidationError(f"Empty poi_id on venue line {line_no}")
        if poi_id in venues:
            raise ValidationError(f"Duplicate venue {poi_id} on line {line_no}")
        functionalities = tuple(f.strip() for f in row.functionalities.split("|") if f.strip())
        venues[poi_id] = VenueProfile(poi_id, row.category.strip(), functionalities)
    return venues


def filter_users(checkins, min_checkins=100, venues=None):
    """Keep users with at least `min_checkins` records, sorted by (user, time)."""
    if min_checkins < 1:
        raise ValidationError("min_checkins must be at least 1")

    counts = Counter(c.user_id for c in checkins)
    kept_users = frozenset(u for u, n in counts.items() if n >= min_checkins)
    kept = sorted(
        (c for c in checkins if c.user_id in kept_users),
        key=lambda c: (c.user_id, c.timestamp),
    )
    dropped = len(counts) - len(kept_users)
    if dropped:
        logger.info(f"Dropped {dropped} users with fewer than {min_checkins} check-ins")
    return Dataset(tuple(kept), dict(venues or {}), kept_users)


def session_of(hour):
    for session, (lo, hi) in enumerate(SESSION_HOURS):
        if lo <= hour < hi:
            return session
    raise ValidationError(f"Hour out of range: {hour}")


def slot_count(mode="28"):
    if mode not in TIME_MODES:
        raise ValidationError(f"Unknown time mode {mode!r}; expected one of {sorted(TIME_MODES)}")
    return TIME_MODES[mode]


def time_index(timestamp, mode="28"):
    """
    Map a timestamp to its time slot.

    Mode "28" is day x session, "hour4" keeps only the session and "dow7"
    only the day of week. Night hours stay on their calendar day.
    """
    slot_count(mode)
    day = timestamp.weekday()
    session = session_of(timestamp.hour)
    if mode == "hour4":
        slot = session
    elif mode == "dow7":
        slot = day
    else:
        slot = day * 4 + session
    return TimeSlot(slot, day, session)


def merge_stays(checkins, gap_minutes=10):
    """Merge one user's consecutive pings at the same POI into stays."""
    if gap_minutes <= 0:
        raise ValidationError("gap_minutes must be positive")

    stays = []
    previous = None
    for record in checkins:
        if previous is not None and record.timestamp < previous.timestamp:
            raise ValidationError(f"Check-ins not sorted by time at {record!r}")
        previous = record

        if stays:
            last = stays[-1]
            gap = (record.timestamp - last.end).total_seconds() / 60
            if record.poi_id == last.poi_id and gap <= gap_minutes:
                stays[-1] = last._replace(end=record.timestamp, count=last.count + 1)
                continue
        stays.append(Stay(record.poi_id, record.timestamp, record.timestamp, 1))
    return stays


def load_dataset(checkins_path, venues_path, min_checkins=100, window=None):
    """Parse, clean and filter a check-in log against its venue file."""
    venues = load_venues(venues_path)
    checkins = parse_checkins(checkins_path, window=window)
    unknown = sorted({c.poi_id for c in checkins if c.poi_id not in venues})
    if unknown:
        raise ValidationError(f"Check-ins reference {len(unknown)} unknown POIs, e.g. {unknown[:5]}")
    data = filter_users(checkins, min_checkins, venues)
    logger.info(f"Loaded {data!r}")
    return data


def write_checkins(path, checkins):
    frame = pd.DataFrame(
        {
            "user_id": [c.user_id for c in checkins],
            "timestamp": [c.timestamp.strftime(TIMESTAMP_FORMAT) for c in checkins],
            "poi_id": [c.poi_id for c in checkins],
        },
        columns=list(CHECKIN_HEADER),
    )
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def write_venues(path, venues):
    profiles = [venues[b] for b in sorted(venues)]
    frame = pd.DataFrame(
        {
            "poi_id": [v.poi_id for v in profiles],
            "category": [v.category for v in profiles],
            "functionalities": ["|".join(v.functionalities) for v in profiles],
        },
        columns=list(VENUE_HEADER),
    )
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")


def parse_timestamp(text):
    try:
        return datetime.strptime(text.strip(), TIMESTAMP_FORMAT)
    except ValueError:
        raise ValidationError(f"Bad timestamp {text!r}; expected YYYY-MM-DDTHH:MM")
