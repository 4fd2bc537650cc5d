export type PresetsResponse = {
  ratios: number[];
  mu_values: number[];
  K: number;
  C: number;
  model_ids: Record<string, string>;
};

export type ReconstructRequest = {
  image: string | number[][];
  ratio: number;
  mu?: number;
  encoding?: number[];
  return_truth_metrics?: boolean;
};

export type ReconstructResponse = {
  reconstruction: string;
  psnr_db?: number;
  ssim?: number;
  path_mask: boolean[][];
  n_am: [number, number];
  dynamic_gflops: number;
  static_gflops: number;
  model_id: string;
};

export type HistoryPoint = {
  encoding: number[];
  psnr_db: number | null;
  dynamic_gflops: number;
};

export type ExplorerState = {
  currentImage: string | null;
  ratio: number | null;
  muOrEncoding: number[] | null;
  lastResponse: ReconstructResponse | null;
  history: HistoryPoint[];
  /** transient message for transport-level failures; results stay on screen */
  banner: string | null;
  /** shown in place of results when the server reply fails shape checks */
  errorCard: string | null;
};

export function initialState(): ExplorerState {
  return {
    currentImage: null,
    ratio: null,
    muOrEncoding: null,
    lastResponse: null,
    history: [],
    banner: null,
    errorCard: null,
  };
}
