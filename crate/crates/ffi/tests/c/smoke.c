#include <stdio.h>
#include "poisoncert.h"

static const char *CONFIG =
    "[dataset]\n"
    "source = \"halfmoons\"\n"
    "n_train = 12\n"
    "n_test = 8\n"
    "seed = 1\n"
    "batch_size = 4\n"
    "epochs = 2\n"
    "[train]\n"
    "lr = 0.5\n"
    "loss = \"hinge\"\n"
    "init = { kind = \"seeded\", hidden = [], seed = 2 }\n"
    "[threat]\n"
    "kind = \"bounded\"\n"
    "budget = 2\n"
    "label_flip = true\n"
    "[objective]\n"
    "kind = \"test_error\"\n";

int main(void) {
    PcConfig *cfg = NULL;
    if (pc_config_from_toml(CONFIG, &cfg) != PC_STATUS_OK) {
        fprintf(stderr, "config: %s\n", pc_last_error());
        return 1;
    }
    pc_config_set_deterministic(cfg, true);
    PcCertificate *cert = NULL;
    if (pc_certify(cfg, &cert) != PC_STATUS_OK) {
        fprintf(stderr, "certify: %s\n", pc_last_error());
        return 1;
    }
    PcSummary s;
    pc_certificate_summary(cert, &s);
    size_t idx[2];
    size_t len = 0;
    if (pc_certificate_poisoned(cert, idx, 2, &len) != PC_STATUS_OK) {
        return 1;
    }
    printf("status %d primal %g bound %g poisoned %zu\n", (int)s.status, s.primal, s.bound, len);
    pc_certificate_free(cert);
    pc_config_free(cfg);

    if (pc_config_from_toml("[dataset", &cfg) != PC_STATUS_CONFIG || pc_last_error() == NULL) {
        return 2;
    }
    return 0;
}
