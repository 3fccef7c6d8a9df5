#include <math.h>
#include <stdio.h>
#include <string.h>

#include "bev2d.h"

#define CHECK(cond)                                              \
    do {                                                         \
        if (!(cond)) {                                           \
            fprintf(stderr, "check failed line %d: %s\n", __LINE__, #cond); \
            return 1;                                            \
        }                                                        \
    } while (0)

int main(void) {
    Bev2dCamera cam = {1000, 1000, 500, 500, {1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0}, 1000, 1000};
    Bev2dBox3D cube = {{0, 0, 10}, {1, 1, 1}, 0};
    Bev2dBox2D out;
    double jac[35];
    CHECK(bev2d_project_box(&cam, &cube, &out, jac) == BEV2D_STATUS_OK);
    CHECK(fabs(out.w - 1000.0 / 9.5) < 1e-9);
    CHECK(fabs(jac[0] - 1000.0 / 9.5) < 1e-9);

    double g;
    CHECK(bev2d_giou(&out, &out, &g) == BEV2D_STATUS_OK && fabs(g - 1.0) < 1e-12);

    double f;
    CHECK(bev2d_focal_loss(0.5, 0.25, 2.0, &f) == BEV2D_STATUS_OK && fabs(f - 0.0433217) < 1e-6);

    Bev2dTpErrors tp = {0.6, 0.3, 0.4, 0.5, 0.2};
    double n;
    CHECK(bev2d_nds(0.5, &tp, &n) == BEV2D_STATUS_OK && fabs(n - 0.55) < 1e-12);

    double costs[6] = {4, 1, 6, 2, 0, 5};
    int64_t assign[2];
    double total;
    CHECK(bev2d_hungarian(costs, 2, 3, assign, &total) == BEV2D_STATUS_OK);
    CHECK(assign[0] == 1 && assign[1] == 0 && total == 3.0);

    CHECK(bev2d_giou(NULL, &out, &g) == BEV2D_STATUS_NULL_POINTER);
    CHECK(strlen(bev2d_last_error()) > 0);

    Bev2dDataset *ds = NULL;
    CHECK(bev2d_dataset_open("/nonexistent/dataset", &ds) != BEV2D_STATUS_OK && ds == NULL);
    printf("ok\n");
    return 0;
}
