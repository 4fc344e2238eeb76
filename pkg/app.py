# app.py
# Optional: load local .env (NOWCAST_CACHE_DIR)
try:
    from dotenv import load_dotenv  # type: ignore
    load_dotenv()
except Exception:
    pass

from src.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
