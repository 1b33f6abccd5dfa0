#include <stdio.h>
#include <stdlib.h>
#include "sebsfv.h"

int main(void) {
    enum { W = 8, H = 4, N = 3 };
    double data[W * H * N];
    for (int i = 0; i < W * H * N; i++) data[i] = (double)(i % 7) / 7.0;
    SbfvVideo *v = NULL;
    if (sbfv_video_from_frames(W, H, N, data, NULL, &v) != SBFV_STATUS_OK) return 1;
    size_t w = 0, h = 0, n = 0;
    if (sbfv_video_dims(v, &w, &h, &n) != SBFV_STATUS_OK || w != W || h != H || n != N) return 2;
    double back[W * H * N];
    if (sbfv_video_copy_data(v, back, W * H * N) != SBFV_STATUS_OK) return 3;
    for (int i = 0; i < W * H * N; i++) if (back[i] != data[i]) return 4;
    if (sbfv_video_copy_data(v, back, 5) != SBFV_STATUS_BUFFER_TOO_SMALL) return 5;
    char msg[128];
    if (sbfv_last_error(msg, sizeof msg) == 0) return 6;
    double h0 = -1.0;
    if (sbfv_entropy(v, 0, &h0) != SBFV_STATUS_OK || h0 <= 0.0) return 7;
    if (sbfv_video_dims(NULL, &w, &h, &n) != SBFV_STATUS_NULL_POINTER) return 8;
    SbfvConfig cfg = sbfv_config_default();
    if (cfg.chunk != 100 || cfg.k != 5) return 9;
    sbfv_video_free(v);
    printf("ok %s\n", sbfv_version());
    return 0;
}
