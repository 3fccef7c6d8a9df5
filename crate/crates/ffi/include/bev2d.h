#ifndef BEV2D_H
#define BEV2D_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every call.
 */
typedef enum Bev2dStatus {
  BEV2D_STATUS_OK = 0,
  BEV2D_STATUS_NULL_POINTER = 1,
  BEV2D_STATUS_INVALID_ARGUMENT = 2,
  /*
   The box projects outside the image or behind the camera.
   */
  BEV2D_STATUS_NOT_VISIBLE = 3,
  /*
   No finite depth under the queried box.
   */
  BEV2D_STATUS_NO_DEPTH = 4,
  BEV2D_STATUS_IO = 5,
  BEV2D_STATUS_FORMAT = 6,
  BEV2D_STATUS_CHECKSUM_MISMATCH = 7,
  BEV2D_STATUS_UNSUPPORTED_VERSION = 8,
  /*
   A buffer supplied by the caller is too small.
   */
  BEV2D_STATUS_BUFFER_TOO_SMALL = 9,
  BEV2D_STATUS_INTERNAL = 10,
} Bev2dStatus;

/*
 A dataset directory loaded and checksum-verified.
 */
typedef struct Bev2dDataset Bev2dDataset;

/*
 A depth map loaded from a `.dpm` file.
 */
typedef struct Bev2dDepthMap Bev2dDepthMap;

/*
 Pinhole camera: `ego_to_cam` maps ego-frame points into the camera frame
 (x right, y down, z forward) as `rotation * p + translation`, with
 `rotation` row-major.
 */
typedef struct Bev2dCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  double rotation[9];
  double translation[3];
  uint32_t width;
  uint32_t height;
} Bev2dCamera;

/*
 Ego-frame box; `dims` is (length, width, height).
 */
typedef struct Bev2dBox3D {
  double center[3];
  double dims[3];
  double yaw;
} Bev2dBox3D;

/*
 Image box by center and size, plus camera-frame depth.
 */
typedef struct Bev2dBox2D {
  double x;
  double y;
  double w;
  double h;
  double depth;
} Bev2dBox2D;

typedef struct Bev2dTpErrors {
  double ate;
  double ase;
  double aoe;
  double ave;
  double aae;
} Bev2dTpErrors;

/*
 Evaluation before and after a fine-tuning run.
 */
typedef struct Bev2dFinetuneSummary {
  double initial_map;
  double initial_nds;
  double initial_median_center_error;
  double final_map;
  double final_nds;
  double final_median_center_error;
  double final_aoe;
  uint64_t steps;
} Bev2dFinetuneSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread; empty if none. The
 pointer stays valid until the next failing call on the same thread.
 */
const char *bev2d_last_error(void);

/*
 Projects `bbox` into `camera`. When `jacobian` is not null it receives
 the 5x7 row-major sensitivity of (x, y, w, h, depth) to (cx, cy, cz, l,
 w, h, yaw).
 */
enum Bev2dStatus bev2d_project_box(const struct Bev2dCamera *camera,
                                   const struct Bev2dBox3D *bbox,
                                   struct Bev2dBox2D *out,
                                   double *jacobian);

/*
 Generalized IoU of two boxes, in [-1, 1].
 */
enum Bev2dStatus bev2d_giou(const struct Bev2dBox2D *a, const struct Bev2dBox2D *b, double *out);

/*
 Focal loss of probability `p` for the true class.
 */
enum Bev2dStatus bev2d_focal_loss(double p, double alpha, double gamma, double *out);

/*
 Detection score from mAP and the five mean TP errors.
 */
enum Bev2dStatus bev2d_nds(double map, const struct Bev2dTpErrors *tp, double *out);

/*
 Minimum-cost assignment over a `rows` x `cols` row-major matrix.
 `pred_to_gt` (length `rows`) receives the matched column or -1.
 */
enum Bev2dStatus bev2d_hungarian(const double *costs,
                                 size_t rows,
                                 size_t cols,
                                 int64_t *pred_to_gt,
                                 double *total_cost);

/*
 Opens the dataset directory at `path`.
 */
enum Bev2dStatus bev2d_dataset_open(const char *path, struct Bev2dDataset **out);

void bev2d_dataset_free(struct Bev2dDataset *dataset);

enum Bev2dStatus bev2d_dataset_scene_count(const struct Bev2dDataset *dataset, size_t *out);

/*
 Id of scene `index`, valid while the dataset lives.
 */
enum Bev2dStatus bev2d_dataset_scene_id(const struct Bev2dDataset *dataset,
                                        size_t index,
                                        const char **out);

/*
 Fine-tunes a detector initialized with the default noise model on the
 dataset, with default training settings except the given ones, and
 reports the evaluation before and after.
 */
enum Bev2dStatus bev2d_finetune(const struct Bev2dDataset *dataset,
                                uint32_t epochs,
                                double mix_ratio,
                                uint64_t seed,
                                struct Bev2dFinetuneSummary *out);

enum Bev2dStatus bev2d_depth_map_load(const char *path, struct Bev2dDepthMap **out);

void bev2d_depth_map_free(struct Bev2dDepthMap *map);

enum Bev2dStatus bev2d_depth_map_size(const struct Bev2dDepthMap *map,
                                      uint32_t *width,
                                      uint32_t *height);

/*
 Median finite depth under `bbox`.
 */
enum Bev2dStatus bev2d_depth_map_box_depth(const struct Bev2dDepthMap *map,
                                           const struct Bev2dBox2D *bbox,
                                           double *out);

/*
 Copies `bev2d_last_error()` into `buf` including the terminator.
 Returns `BufferTooSmall` and writes the required size to `needed` when
 `cap` is too small.
 */
enum Bev2dStatus bev2d_copy_last_error(char *buf, size_t cap, size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BEV2D_H */
