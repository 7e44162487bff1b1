// Wire shapes of the QA service. Field names mirror the JSON payloads
// exactly; nothing here is computed client-side.

export type Answer = {
  text: string;
  char_start: number;
  char_end: number;
  token_start: number;
  token_end: number;
  score: number;
};

export type RoundRecord = {
  round: number;
  participants: string[];
  n_total: number;
  aggregate_digest: string;
  val_em: number | null;
  val_f1: number | null;
  wall_time: number;
};

export type AskRequest = {
  context: string;
  question: string;
};

export type FeedbackRequest = {
  question: string;
  context_id: string;
  pred_start: number;
  pred_end: number;
  pred_text: string;
  correction: string;
};

export type FeedbackAck = {
  id: string;
};
