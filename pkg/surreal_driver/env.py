import os
from dotenv import load_dotenv

load_dotenv()

SURREAL_LLM_API_KEY = os.getenv("SURREAL_LLM_API_KEY")

SURREAL_LLM_ENDPOINT = os.getenv("SURREAL_LLM_ENDPOINT")
SURREAL_LLM_MODEL = os.getenv("SURREAL_LLM_MODEL", "gpt-4")
SURREAL_LLM_TIMEOUT = os.getenv("SURREAL_LLM_TIMEOUT", "30")
