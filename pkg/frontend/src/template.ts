// Chat transcript template. This is a verbatim copy of the CLI's template;
// an end-to-end test compares UI and CLI outputs to keep the two in sync.

export const PROMPT_HEADER = "### Prompt:\n";
export const RESPONSE_HEADER = "### Response:\n";

export function renderTurn(userText: string): string {
  return `${PROMPT_HEADER}${userText}\n${RESPONSE_HEADER}`;
}

export interface Turn {
  user: string;
  assistant: string;
}

export function renderTranscript(turns: Turn[], nextUser: string): string {
  const parts = turns.map((t) => `${renderTurn(t.user)}${t.assistant}\n`);
  parts.push(renderTurn(nextUser));
  return parts.join("");
}
